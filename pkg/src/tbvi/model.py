"""Single-stochastic-layer latent-variable model.

Encoder (inference network, parameters phi): two tanh hidden layers, then
two affine heads producing the mean and log-variance of a diagonal
Gaussian over latents. Decoder (generative network, parameters theta):
two tanh hidden layers, then an affine head producing 784 Bernoulli
logits. Prior over latents is standard Normal.

The two parameter groups are kept strictly disjoint so estimators that
route their gradients separately can address either group by name.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T

LOG_2PI = float(np.log(2.0 * np.pi))

PHI_NAMES = ("enc_w1", "enc_b1", "enc_w2", "enc_b2", "enc_w_mu", "enc_b_mu", "enc_w_lv", "enc_b_lv")
THETA_NAMES = ("dec_w1", "dec_b1", "dec_w2", "dec_b2", "dec_w_out", "dec_b_out")


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 784
    hidden_dim: int = 200
    latent_dim: int = 50
    n_hidden_layers: int = 2

    def __post_init__(self):
        if min(self.input_dim, self.hidden_dim, self.latent_dim) < 1:
            raise ValueError("all dimensions must be >= 1")
        if self.n_hidden_layers != 2:
            raise ValueError("only the two-hidden-layer layout is supported")


REFERENTIAL = ModelConfig(input_dim=784, hidden_dim=200, latent_dim=50)
LARGER = ModelConfig(input_dim=784, hidden_dim=400, latent_dim=20)


@dataclass
class DiagGaussian:
    """Batched diagonal Gaussian: mu and log-variance, each (B, latent_dim)."""

    mu: T.Tensor
    log_var: T.Tensor


class ModelParams:
    """Named phi (encoder) and theta (decoder) tensors.

    Iteration order is fixed (phi names then theta names) and is the
    canonical order for initialization, checkpoints, and Adam state.
    """

    def __init__(self, config: ModelConfig, phi: dict[str, T.Tensor], theta: dict[str, T.Tensor]):
        self.config = config
        self.phi = phi
        self.theta = theta

    def items(self):
        for name in PHI_NAMES:
            yield name, self.phi[name]
        for name in THETA_NAMES:
            yield name, self.theta[name]

    def group_of(self, name: str) -> str:
        return "phi" if name in PHI_NAMES else "theta"


def _shapes(config: ModelConfig) -> dict[str, tuple]:
    i, h, d = config.input_dim, config.hidden_dim, config.latent_dim
    return {
        "enc_w1": (i, h), "enc_b1": (h,),
        "enc_w2": (h, h), "enc_b2": (h,),
        "enc_w_mu": (h, d), "enc_b_mu": (d,),
        "enc_w_lv": (h, d), "enc_b_lv": (d,),
        "dec_w1": (d, h), "dec_b1": (h,),
        "dec_w2": (h, h), "dec_b2": (h,),
        "dec_w_out": (h, i), "dec_b_out": (i,),
    }


def param_count(config: ModelConfig) -> int:
    """Exact number of trainable scalars in phi and theta."""
    return sum(int(np.prod(s)) for s in _shapes(config).values())


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases.

    Draw order follows the canonical parameter order, so a seed fixes
    every weight bit-exactly.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7B71]))
    shapes = _shapes(config)
    tensors: dict[str, T.Tensor] = {}
    for name in PHI_NAMES + THETA_NAMES:
        shape = shapes[name]
        if len(shape) == 2:
            bound = 1.0 / np.sqrt(shape[0])
            tensors[name] = T.Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)
        else:
            tensors[name] = T.Tensor(np.zeros(shape), requires_grad=True)
    return ModelParams(
        config,
        phi={n: tensors[n] for n in PHI_NAMES},
        theta={n: tensors[n] for n in THETA_NAMES},
    )


def encode(params: ModelParams, x: np.ndarray) -> DiagGaussian:
    """Inference pass: binary pixels (B, input_dim) -> posterior parameters."""
    xt = T.Tensor(np.asarray(x, dtype=np.float64))
    p = params.phi
    h = T.tanh(T.affine(xt, p["enc_w1"], p["enc_b1"]))
    h = T.tanh(T.affine(h, p["enc_w2"], p["enc_b2"]))
    mu = T.affine(h, p["enc_w_mu"], p["enc_b_mu"])
    log_var = T.affine(h, p["enc_w_lv"], p["enc_b_lv"])
    return DiagGaussian(mu=mu, log_var=log_var)


def reparameterize(q: DiagGaussian, noise: np.ndarray) -> T.Tensor:
    """z = mu + exp(log_var / 2) * eps for eps ~ N(0, I).

    ``noise`` has shape (B, M, K, D); mu and log_var are (B, D) and
    broadcast across the (M, K) sample axes. Differentiable with respect
    to phi through both mu and log_var.
    """
    noise = np.asarray(noise, dtype=np.float64)
    if noise.ndim != 4 or noise.shape[0] != q.mu.shape[0] or noise.shape[3] != q.mu.shape[1]:
        raise T.ShapeMismatchError(
            f"noise shape {noise.shape} does not conform to mu shape {q.mu.shape}"
        )
    b, d = q.mu.shape
    mu = T.reshape(q.mu, (b, 1, 1, d))
    std = T.exp(T.reshape(q.log_var, (b, 1, 1, d)) * 0.5)
    return mu + std * T.Tensor(noise)


def decode(params: ModelParams, z: T.Tensor) -> T.Tensor:
    """Generative pass: latents (..., D) -> Bernoulli logits (..., input_dim)."""
    lead = z.shape[:-1]
    d = z.shape[-1]
    flat = T.reshape(z, (int(np.prod(lead)) if lead else 1, d))
    p = params.theta
    h = T.tanh(T.affine(flat, p["dec_w1"], p["dec_b1"]))
    h = T.tanh(T.affine(h, p["dec_w2"], p["dec_b2"]))
    logits = T.affine(h, p["dec_w_out"], p["dec_b_out"])
    return T.reshape(logits, lead + (logits.shape[-1],))


def bernoulli_log_prob(logits: T.Tensor, x: np.ndarray) -> T.Tensor:
    """Per-sample log p(x | z) summed over pixels, from raw logits.

    Fused form -softplus(-logit) - (1 - x) * logit, never log(sigmoid(.)),
    so it stays exact for |logit| far beyond 30.
    """
    xb = np.asarray(x, dtype=np.float64)
    while xb.ndim < len(logits.shape):
        xb = xb[:, None]
    per_pixel = -1.0 * T.softplus(-logits) - T.Tensor(1.0 - xb) * logits
    return T.tsum(per_pixel, axis=-1)


def standard_normal_log_prob(z: T.Tensor) -> T.Tensor:
    """log N(z; 0, I) summed over the last axis."""
    d = z.shape[-1]
    return T.tsum(T.square(z), axis=-1) * -0.5 - 0.5 * d * LOG_2PI


def gaussian_log_prob(z: T.Tensor, q: DiagGaussian) -> T.Tensor:
    """log q(z | x) for the diagonal posterior, summed over the last axis."""
    b, d = q.mu.shape
    mu = T.reshape(q.mu, (b, 1, 1, d))
    log_var = T.reshape(q.log_var, (b, 1, 1, d))
    inv_var = T.exp(-1.0 * log_var)
    quad = T.tsum(T.square(z - mu) * inv_var, axis=-1)
    return (quad + T.tsum(log_var, axis=-1) + d * LOG_2PI) * -0.5


def log_joint_parts(params: ModelParams, x: np.ndarray, z: T.Tensor, q: DiagGaussian):
    """(log p(x|z), log p(z), log q(z|x)), each shaped (B, M, K)."""
    logits = decode(params, z)
    return bernoulli_log_prob(logits, x), standard_normal_log_prob(z), gaussian_log_prob(z, q)


def log_weight(params: ModelParams, x: np.ndarray, z: T.Tensor, q: DiagGaussian) -> T.Tensor:
    """log w = log p(x|z) + log p(z) - log q(z|x), shaped (B, M, K)."""
    lpx, lpz, lqz = log_joint_parts(params, x, z, q)
    return lpx + lpz - lqz
