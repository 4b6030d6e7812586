"""Test-set evaluation: importance-weighted bounds, marginal-likelihood
estimates, the posterior-quality gap, and SSIM reconstruction quality.

Evaluation is deterministic per evaluation seed: binarization and latent
noise come from counter-based streams keyed by the seed and fixed chunk
indices, so chunk boundaries never change results.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields

import numpy as np

from . import bounds as B
from . import datasets as D
from . import model as M
from .tensor import _sigmoid_values

EVAL_ITEM_CHUNK = 200
EVAL_CHUNK_ELEMS = 4_000_000  # bounds the (items x samples x pixels) logits block
LOGPX_K_CHUNK = 500

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = (0.01 * 1.0) ** 2
SSIM_C2 = (0.03 * 1.0) ** 2


@dataclass
class MetricRow:
    model_id: str
    dataset_trained: str
    dataset_evaluated: str
    iwae64: float
    logpx: float
    ssim_mean: float
    ssim_std: float
    n_items: int

    @property
    def minus_kl(self) -> float:
        # Derived, never stored: recomputation from the row is exact.
        return kl_gap(self.iwae64, self.logpx)

    def csv_values(self):
        vals = []
        for f in fields(self):
            vals.append(getattr(self, f.name))
            if f.name == "logpx":
                vals.append(self.minus_kl)
        return vals


METRIC_CSV_HEADER = [
    "model_id", "dataset_trained", "dataset_evaluated",
    "iwae64", "logpx", "minus_kl", "ssim_mean", "ssim_std", "n_items",
]


def write_metric_rows(path, rows: list[MetricRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_CSV_HEADER)
        for r in rows:
            w.writerow(r.csv_values())


def _eval_noise(eval_seed: int, block: int, shape: tuple) -> np.ndarray:
    gen = np.random.Generator(
        np.random.Philox(key=np.uint64([eval_seed, block]), counter=np.uint64([0, 0, 0, 4]))
    )
    return gen.standard_normal(shape)


def _binarized_subset(dataset: D.ImageSet, eval_seed: int, subset: int | None, binarize_mode: str) -> np.ndarray:
    x = D.binarize(dataset, mode=binarize_mode, seed=eval_seed, epoch=0)
    if subset is not None:
        x = x[:subset]
    return x


def eval_log_weights(params: M.ModelParams, x: np.ndarray, k: int, eval_seed: int, block: int) -> np.ndarray:
    """(n_items, k) log weights for one noise block; no tape recorded.

    Items are processed in chunks sized so the decoded-logit block stays
    within a fixed element budget; the noise stream is keyed per item
    index, so the chunk size never changes the values.
    """
    out = np.empty((x.shape[0], k))
    d = params.config.latent_dim
    step = min(EVAL_ITEM_CHUNK, max(1, EVAL_CHUNK_ELEMS // (k * params.config.input_dim)))
    for i in range(0, x.shape[0], step):
        xc = x[i : i + step]
        noise = np.concatenate(
            [_eval_noise(eval_seed, block * 1_000_000 + i + j, (1, 1, k, d)) for j in range(xc.shape[0])]
        )
        q = M.encode(params, xc)
        z = M.reparameterize(q, noise)
        out[i : i + step] = M.log_weight(params, xc, z, q).values[:, 0, :]
    return out


def iwae_bound_eval(
    params: M.ModelParams,
    dataset: D.ImageSet,
    k_eval: int,
    eval_seed: int = 0,
    subset: int | None = None,
    binarize_mode: str = "stochastic",
) -> float:
    """Mean over items of log-mean-exp of ``k_eval`` log weights (nats/item)."""
    if k_eval < 1:
        raise ValueError("k_eval must be >= 1")
    x = _binarized_subset(dataset, eval_seed, subset, binarize_mode)
    logw = eval_log_weights(params, x, k_eval, eval_seed, block=0)
    return float(B.iwae_per_item(logw).mean())


def log_marginal_estimate(
    params: M.ModelParams,
    dataset: D.ImageSet,
    eval_seed: int = 0,
    k_total: int = 5000,
    subset: int | None = None,
    binarize_mode: str = "stochastic",
) -> float:
    """High-K bound as a marginal log-likelihood estimate (nats/item).

    The k_total weights are drawn in chunks of 500 and combined by exact
    streaming log-sum-exp, so the result is identical (to float round-off)
    to a monolithic reduction over all k_total weights.
    """
    x = _binarized_subset(dataset, eval_seed, subset, binarize_mode)
    running = np.full(x.shape[0], -np.inf)
    done = 0
    block = 1
    while done < k_total:
        k = min(LOGPX_K_CHUNK, k_total - done)
        logw = eval_log_weights(params, x, k, eval_seed, block=block)
        m = logw.max(axis=1)
        chunk_lse = m + np.log(np.exp(logw - m[:, None]).sum(axis=1))
        running = np.logaddexp(running, chunk_lse)
        done += k
        block += 1
    return float((running - np.log(k_total)).mean())


def kl_gap(iwae64: float, logpx: float) -> float:
    """Bound gap iwae64 - logpx; the negated posterior-approximation KL."""
    return iwae64 - logpx


# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------

def _gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


_KERNEL = _gaussian_kernel()


def _windowed_mean(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Gaussian-weighted local means with symmetric-reflect padding."""
    half = kernel.shape[0] // 2
    padded = np.pad(img, half, mode="symmetric")
    windows = np.lib.stride_tricks.sliding_window_view(padded, kernel.shape)
    return np.einsum("ijkl,kl->ij", windows, kernel)


def ssim(img_a: np.ndarray, img_b: np.ndarray) -> float:
    """Mean local structural similarity of two [0, 1] images.

    11x11 Gaussian window (sigma 1.5), stability constants C1 = (0.01 L)^2
    and C2 = (0.03 L)^2 at dynamic range L = 1, symmetric-reflect borders.
    """
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"ssim needs two equal-shape 2-d images, got {a.shape} and {b.shape}")
    mu_a = _windowed_mean(a, _KERNEL)
    mu_b = _windowed_mean(b, _KERNEL)
    var_a = _windowed_mean(a * a, _KERNEL) - mu_a * mu_a
    var_b = _windowed_mean(b * b, _KERNEL) - mu_b * mu_b
    cov = _windowed_mean(a * b, _KERNEL) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float((num / den).mean())


# ---------------------------------------------------------------------------
# Reconstructions
# ---------------------------------------------------------------------------

def reconstruct(params: M.ModelParams, x: np.ndarray) -> np.ndarray:
    """Posterior-mean reconstruction: encode, take z = mu, decode to Bernoulli means."""
    q = M.encode(params, x)
    b, d = q.mu.shape
    z = M.reparameterize(q, np.zeros((b, 1, 1, d)))
    logits = M.decode(params, z).values[:, 0, 0, :]
    return _sigmoid_values(logits)


def write_pgm_grid(path, inputs: np.ndarray, recons: np.ndarray, rows: int, cols: int) -> None:
    """8-bit binary PGM: a row of inputs above the row of reconstructions."""
    n = inputs.shape[0]
    canvas = np.zeros((2 * rows, n * cols))
    for i in range(n):
        canvas[:rows, i * cols : (i + 1) * cols] = inputs[i].reshape(rows, cols)
        canvas[rows:, i * cols : (i + 1) * cols] = recons[i].reshape(rows, cols)
    data = np.clip(np.rint(canvas * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())


def reconstruction_eval(
    params: M.ModelParams,
    dataset: D.ImageSet,
    eval_seed: int = 0,
    subset: int | None = None,
    binarize_mode: str = "stochastic",
    grid_path=None,
    grid_items: int = 10,
):
    """SSIM of posterior-mean reconstructions against binarized inputs.

    Returns (mean, std, n_items); optionally writes a qualitative PGM grid
    of the first ``grid_items`` pairs.
    """
    x = _binarized_subset(dataset, eval_seed, subset, binarize_mode)
    scores = np.empty(x.shape[0])
    for i in range(0, x.shape[0], EVAL_ITEM_CHUNK):
        xc = x[i : i + EVAL_ITEM_CHUNK]
        recon = reconstruct(params, xc)
        for j in range(xc.shape[0]):
            scores[i + j] = ssim(
                xc[j].reshape(dataset.rows, dataset.cols),
                recon[j].reshape(dataset.rows, dataset.cols),
            )
        if i == 0 and grid_path is not None:
            g = min(grid_items, xc.shape[0])
            write_pgm_grid(grid_path, xc[:g], recon[:g], dataset.rows, dataset.cols)
    return float(scores.mean()), float(scores.std()), int(scores.size)


def cross_dataset_eval(
    params: M.ModelParams,
    trained_on: str,
    eval_set: D.ImageSet,
    model_id: str = "model",
    eval_seed: int = 0,
    k_eval: int = 64,
    logpx_k: int = 5000,
    subset: int | None = None,
    binarize_mode: str = "stochastic",
    grid_path=None,
) -> MetricRow:
    """Evaluate a trained model on any dataset of matching dimensionality."""
    if eval_set.rows * eval_set.cols != params.config.input_dim:
        raise ValueError(
            f"dataset dimensionality {eval_set.rows * eval_set.cols} does not match "
            f"model input {params.config.input_dim}"
        )
    iwae64 = iwae_bound_eval(params, eval_set, k_eval, eval_seed, subset, binarize_mode)
    logpx = log_marginal_estimate(params, eval_set, eval_seed, logpx_k, subset, binarize_mode)
    s_mean, s_std, n = reconstruction_eval(
        params, eval_set, eval_seed, subset, binarize_mode, grid_path=grid_path
    )
    return MetricRow(
        model_id=model_id,
        dataset_trained=trained_on,
        dataset_evaluated=eval_set.source_name,
        iwae64=iwae64,
        logpx=logpx,
        ssim_mean=s_mean,
        ssim_std=s_std,
        n_items=n,
    )
