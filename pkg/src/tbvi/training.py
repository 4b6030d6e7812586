"""Optimization loop: Adam, the staged learning-rate schedule, dual-optimizer
routing for the dual-target estimator, beta co-optimization, checkpoints,
and per-epoch metric logging.

Determinism contract: (config, seed) fixes the entire trajectory. All
randomness is counter-based and keyed by (seed, epoch, batch), so resuming
from a checkpoint replays the remaining epochs bit-exactly. Wall-clock
seconds are logged for operator convenience and are the one metrics column
exempt from the bit-reproducibility guarantee.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import struct
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import bounds as B
from . import datasets as D
from . import model as M
from . import tensor as T

CHECKPOINT_MAGIC = b"TBVI"
CHECKPOINT_VERSION = 1

SCHEDULE_SEGMENTS = 8
SCHEDULE_TOTAL = sum(3**i for i in range(SCHEDULE_SEGMENTS))  # 3280
BASE_LR = 1e-3

METRICS_HEADER = ["epoch", "lr", "train_elbo", "iwae64", "logpx", "minus_kl", "beta", "seconds"]


class CheckpointError(RuntimeError):
    """Corrupt, truncated, or mismatched checkpoint file."""


def lr_schedule(epoch: int) -> float:
    """Staged decay: segment i (of length 3^i epochs) runs at 1e-3 * 10^(-i/7).

    Segments i = 0..7 cover exactly 3280 epochs; epochs past the last
    segment clamp to its rate so extended runs stay defined.
    """
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    boundary = 0
    for i in range(SCHEDULE_SEGMENTS):
        boundary += 3**i
        if epoch < boundary:
            return BASE_LR * 10.0 ** (-i / 7.0)
    return BASE_LR * 10.0 ** (-(SCHEDULE_SEGMENTS - 1) / 7.0)


class AdamState:
    """Per-parameter first/second moments with bias-corrected updates."""

    def __init__(self, names, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {n: None for n in names}
        self.v = {n: None for n in names}

    def step(self, params: dict[str, T.Tensor], grads: dict[str, np.ndarray], lr: float) -> None:
        """One minimization step; ``grads`` must be descent-direction (of the loss)."""
        for name, g in grads.items():
            if not np.isfinite(g).all():
                raise T.NumericError(f"non-finite gradient for parameter {name!r}")
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            if self.m[name] is None:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / c1
            v_hat = self.v[name] / c2
            p = params[name]
            p.values = p.values - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def adam_step(state: AdamState, params: dict[str, T.Tensor], grads: dict[str, np.ndarray], lr: float) -> None:
    state.step(params, grads, lr)


@dataclass
class TrainConfig:
    dataset: str = "mnist"
    model: M.ModelConfig = field(default_factory=lambda: M.REFERENTIAL)
    bound: B.BoundConfig = field(default_factory=B.BoundConfig)
    epochs: int = SCHEDULE_TOTAL
    batch_size: int = 20
    seed: int = 0
    data_dir: str | None = None
    out_dir: str = "runs/out"
    checkpoint_every: int = 50
    eval_every: int = 10
    eval_subset: int = 1000
    eval_k: int = 64
    final_logpx_k: int = 5000
    binarize_mode: str = "stochastic"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


def default_epochs(dataset: str) -> int:
    return SCHEDULE_TOTAL if dataset == "mnist" else 1000


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------
# Layout: magic "TBVI" | version u16 | header_len u32 | header JSON (utf-8)
# | payload (concatenated little-endian f64 tensors) | sha256(everything
# before the digest). The header's tensor table records name/shape/offset
# for every parameter and optimizer moment, making the payload
# self-describing.


def _state_blobs(params: M.ModelParams, optimizers: dict[str, AdamState], beta_raw: float | None):
    table = []
    payload = io.BytesIO()

    def put(name, arr):
        arr = np.ascontiguousarray(arr, dtype="<f8")
        table.append({"name": name, "shape": list(arr.shape), "offset": payload.tell()})
        payload.write(arr.tobytes())

    for name, t in params.items():
        put(f"param/{name}", t.values)
    for opt_name, opt in optimizers.items():
        for pname, m in opt.m.items():
            if m is not None:
                put(f"adam/{opt_name}/m/{pname}", m)
                put(f"adam/{opt_name}/v/{pname}", opt.v[pname])
    meta = {
        "optimizers": {name: {"t": opt.t, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps}
                       for name, opt in optimizers.items()},
        "beta_raw": beta_raw,
    }
    return table, payload.getvalue(), meta


def save_checkpoint(
    path,
    config: TrainConfig,
    params: M.ModelParams,
    optimizers: dict[str, AdamState],
    epoch: int,
    beta_raw: float | None = None,
) -> None:
    """Serialize the full training state; the round trip is bit-exact."""
    table, payload, meta = _state_blobs(params, optimizers, beta_raw)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "model": asdict(config.model),
        "bound": asdict(config.bound),
        "train": {"dataset": config.dataset, "seed": config.seed, "batch_size": config.batch_size,
                  "epochs": config.epochs, "binarize_mode": config.binarize_mode},
        "epoch": epoch,
        "rng": {"scheme": "philox-counter", "seed": config.seed, "next_epoch": epoch},
        "tensors": table,
        **meta,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<HI", CHECKPOINT_VERSION, len(blob)))
    buf.write(blob)
    buf.write(payload)
    digest = hashlib.sha256(buf.getvalue()).digest()
    buf.write(digest)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> dict:
    """Parse and integrity-check a checkpoint; returns header plus tensors."""
    raw = Path(path).read_bytes()
    if len(raw) < 42 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"not a checkpoint file: {path}")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"checksum mismatch (corrupt or truncated): {path}")
    version, header_len = struct.unpack("<HI", raw[4:10])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[10 : 10 + header_len].decode())
    payload = body[10 + header_len :]
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=start).reshape(shape)
        tensors[entry["name"]] = arr.copy()
    header["tensor_data"] = tensors
    return header


def restore_state(header: dict, config: TrainConfig):
    """Rebuild params and optimizer state from a parsed checkpoint."""
    if header["model"] != asdict(config.model):
        raise CheckpointError(
            f"checkpoint model config {header['model']} does not match run config {asdict(config.model)}"
        )
    params = M.init_params(config.model, seed=config.seed)
    data = header["tensor_data"]
    for name, t in params.items():
        t.values = data[f"param/{name}"].copy()
    optimizers = {}
    for opt_name, meta in header["optimizers"].items():
        names = [n for n in data if n.startswith(f"adam/{opt_name}/m/")]
        group = [n.split("/", 3)[3] for n in names]
        opt = AdamState(group, beta1=meta["beta1"], beta2=meta["beta2"], eps=meta["eps"])
        opt.t = meta["t"]
        for pname in group:
            opt.m[pname] = data[f"adam/{opt_name}/m/{pname}"].copy()
            opt.v[pname] = data[f"adam/{opt_name}/v/{pname}"].copy()
        optimizers[opt_name] = opt
    return params, optimizers, header.get("beta_raw"), header["epoch"]


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def _batch_noise(seed: int, epoch: int, batch: int, shape: tuple, stream: int) -> np.ndarray:
    gen = np.random.Generator(
        np.random.Philox(key=np.uint64([seed, epoch]), counter=np.uint64([0, 0, batch, 3 + stream]))
    )
    return gen.standard_normal(shape)


def _family_gradients(config: TrainConfig, params: M.ModelParams, x: np.ndarray, epoch: int, batch: int) -> B.GradEstimate:
    bc = config.bound
    b = x.shape[0]
    d = config.model.latent_dim
    if bc.family == "piwae":
        noise_inf = _batch_noise(config.seed, epoch, batch, (b, bc.M, bc.L, d), 0)
        noise_gen = _batch_noise(config.seed, epoch, batch, (b, 1, bc.K, d), 1)
        return B.gradients_piwae(
            params, x, bc.M, bc.L, bc.K, rng=None,
            noise_inference=noise_inf, noise_generative=noise_gen,
        )
    noise = _batch_noise(config.seed, epoch, batch, (b, bc.M, bc.K, d), 0)
    logw = B.sample_log_weights(params, x, bc.M, bc.K, rng=None, noise=noise)
    return B.gradients(bc, logw, params)


def _make_optimizers(config: TrainConfig) -> dict[str, AdamState]:
    if config.bound.family == "piwae":
        # Dual-target training keeps independent moments per network.
        return {
            "phi": AdamState(list(M.PHI_NAMES)),
            "theta": AdamState(list(M.THETA_NAMES)),
        }
    return {"all": AdamState(list(M.PHI_NAMES) + list(M.THETA_NAMES))}


def _apply_updates(config: TrainConfig, optimizers, params: M.ModelParams, est: B.GradEstimate, lr: float) -> None:
    # Objectives report the bound (maximize); Adam minimizes, so negate.
    neg_phi = {n: -g for n, g in est.grad_phi.items()}
    neg_theta = {n: -g for n, g in est.grad_theta.items()}
    if config.bound.family == "piwae":
        optimizers["phi"].step(params.phi, neg_phi, lr)  # inference net first
        optimizers["theta"].step(params.theta, neg_theta, lr)
    else:
        merged = {**neg_phi, **neg_theta}
        both = {**params.phi, **params.theta}
        optimizers["all"].step(both, merged, lr)


@dataclass
class TrainResult:
    checkpoint_path: Path
    metrics_path: Path
    final_metrics: dict
    beta_raw: float | None


def train(config: TrainConfig, resume_from: str | None = None) -> TrainResult:
    """Run the full optimization loop and return artifact locations.

    Per epoch: shuffle, binarize, iterate batches computing the family
    gradient and applying the optimizer(s); the combination estimator's
    beta parameter (when learnable) descends its own derivative at the
    same learning rate. Evaluation metrics are appended at the configured
    cadence and on the final epoch (which also estimates the marginal
    log-likelihood on the test subset).
    """
    from . import metrics as ME

    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_set = D.load_imageset(config.data_dir, config.dataset, "train")
    test_set = D.load_imageset(config.data_dir, config.dataset, "test")

    if resume_from is not None:
        params, optimizers, beta_raw, start_epoch = restore_state(load_checkpoint(resume_from), config)
        if beta_raw is None and config.bound.learnable_beta:
            beta_raw = config.bound.beta_raw
        mode = "a"
    else:
        params = M.init_params(config.model, seed=config.seed)
        optimizers = _make_optimizers(config)
        beta_raw = config.bound.beta_raw if config.bound.learnable_beta else None
        start_epoch = 0
        mode = "w"

    metrics_path = out / "metrics.csv"
    ckpt_path = out / "checkpoint.tbvi"
    eval_subset = min(config.eval_subset, test_set.count)

    with open(metrics_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(METRICS_HEADER)
        final_metrics: dict = {}
        for epoch in range(start_epoch, config.epochs):
            t0 = time.perf_counter()
            lr = lr_schedule(epoch)
            if config.bound.learnable_beta:
                config.bound.beta_raw = beta_raw
                config.bound.beta = B._logistic(beta_raw)
            epoch_objs = []
            for bi, batch in enumerate(
                D.batches(train_set, config.batch_size, epoch, config.seed, mode=config.binarize_mode)
            ):
                try:
                    est = _family_gradients(config, params, batch.data, epoch, bi)
                    _apply_updates(config, optimizers, params, est, lr)
                except T.NumericError as e:
                    raise T.NumericError(f"epoch {epoch} batch {bi}: {e}") from e
                if est.grad_beta is not None:
                    beta_raw = beta_raw - lr * est.grad_beta
                    config.bound.beta_raw = beta_raw
                    config.bound.beta = B._logistic(beta_raw)
                epoch_objs.append(est.objective_value)
            train_elbo = float(np.mean(epoch_objs))

            last = epoch == config.epochs - 1
            row = {
                "epoch": epoch,
                "lr": f"{lr:.10g}",
                "train_elbo": f"{train_elbo:.10g}",
                "iwae64": "",
                "logpx": "",
                "minus_kl": "",
                "beta": f"{config.bound.effective_beta():.10g}" if config.bound.family == "ciwae" else "",
                "seconds": "",
            }
            if last or (config.eval_every and (epoch + 1) % config.eval_every == 0):
                iwae64 = ME.iwae_bound_eval(
                    params, test_set, config.eval_k, eval_seed=config.seed,
                    subset=None if last else eval_subset,
                    binarize_mode=config.binarize_mode,
                )
                row["iwae64"] = f"{iwae64:.10g}"
                if last:
                    # same item set as the final bound, so the gap column
                    # is the literal difference of its two neighbours
                    logpx = ME.log_marginal_estimate(
                        params, test_set, eval_seed=config.seed, k_total=config.final_logpx_k,
                        subset=None, binarize_mode=config.binarize_mode,
                    )
                    row["logpx"] = f"{logpx:.10g}"
                    row["minus_kl"] = f"{ME.kl_gap(iwae64, logpx):.10g}"
                    final_metrics = {"iwae64": iwae64, "logpx": logpx, "minus_kl": ME.kl_gap(iwae64, logpx)}
            row["seconds"] = f"{time.perf_counter() - t0:.3f}"
            writer.writerow([row[c] for c in METRICS_HEADER])
            fh.flush()

            if last or (config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0):
                save_checkpoint(ckpt_path, config, params, optimizers, epoch + 1, beta_raw)

    return TrainResult(
        checkpoint_path=ckpt_path,
        metrics_path=metrics_path,
        final_metrics=final_metrics,
        beta_raw=beta_raw,
    )
