"""Objective estimators over a shared matrix of log importance weights.

Five families, all derived from the same (B, M, K) log-weight matrix:

* ``vae``    - plain Monte Carlo mean of log w over all T = M*K entries
* ``iwae``   - log-mean-exp over K (requires M == 1)
* ``miwae``  - mean over M groups of log-mean-exp over K
* ``ciwae``  - beta * vae + (1 - beta) * iwae on the same K entries
* ``piwae``  - dual target: inference gradients from an (M, L) miwae
               matrix, generative gradients from a (1, K) iwae matrix

Sign convention: every estimator reports the bound itself (a quantity to
maximize, in nats per data item). The trainer owns the negation. The one
exception is :func:`grad_beta`, which is specified directly in
minimization form (the derivative of the negated combination objective
with respect to the unconstrained beta parameter).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model as M
from . import tensor as T

FAMILIES = ("vae", "iwae", "miwae", "ciwae", "piwae")


class ConfigError(ValueError):
    """Estimator configuration violates a family invariant."""


def _logistic(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + float(np.exp(-x)))
    e = float(np.exp(x))
    return e / (1.0 + e)


@dataclass
class BoundConfig:
    """Estimator family plus its sample-budget knobs.

    T = M*K is the per-item weight budget. Family invariants: vae fixes
    K = 1 (all budget in M), iwae and ciwae fix M = 1, piwae additionally
    carries L, the per-group sample count of its inference-side target.
    """

    family: str = "iwae"
    K: int = 64
    M: int = 1
    L: int = 8
    beta: float = 0.5
    learnable_beta: bool = False
    beta_raw: float = 0.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}")
        if self.K < 1 or self.M < 1:
            raise ConfigError("K and M must be >= 1")
        if self.family == "vae" and self.K != 1:
            raise ConfigError("vae uses K = 1; put the budget into M")
        if self.family in ("iwae", "ciwae") and self.M != 1:
            raise ConfigError(f"{self.family} uses M = 1; put the budget into K")
        if self.family == "piwae" and self.L < 1:
            raise ConfigError("piwae requires L >= 1")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must lie in [0, 1], got {self.beta}")
        if self.learnable_beta and self.family != "ciwae":
            raise ConfigError("learnable beta only applies to ciwae")
        if self.learnable_beta:
            # beta is always the logistic image of beta_raw while learning.
            self.beta = _logistic(self.beta_raw)

    @property
    def budget(self) -> int:
        return self.M * self.K

    def effective_beta(self) -> float:
        return _logistic(self.beta_raw) if self.learnable_beta else self.beta


def default_config(family: str, budget: int = 64, beta: float = 0.5, learnable_beta: bool = False) -> BoundConfig:
    """Standard budget split at T = M*K: miwae/piwae (8, 8), iwae K = T, vae M = T."""
    side = int(round(np.sqrt(budget)))
    if family == "vae":
        return BoundConfig(family="vae", K=1, M=budget)
    if family == "iwae":
        return BoundConfig(family="iwae", K=budget, M=1)
    if family == "miwae":
        return BoundConfig(family="miwae", K=side, M=side)
    if family == "ciwae":
        return BoundConfig(family="ciwae", K=budget, M=1, beta=beta, learnable_beta=learnable_beta)
    if family == "piwae":
        return BoundConfig(family="piwae", K=side, M=side, L=side)
    raise ConfigError(f"unknown family {family!r}")


@dataclass
class LogWeightMatrix:
    """(B, M, K) log weights with the tape that produced them."""

    tensor: T.Tensor
    tape: T.Tape | None = None

    @property
    def values(self) -> np.ndarray:
        return self.tensor.values

    @property
    def shape(self) -> tuple:
        return self.tensor.values.shape


@dataclass
class GradEstimate:
    """Named gradients of the bound (ascent direction) plus its value."""

    grad_phi: dict[str, np.ndarray]
    grad_theta: dict[str, np.ndarray]
    objective_value: float
    grad_beta: float | None = None
    extras: dict = field(default_factory=dict)


def _coerce(logw) -> T.Tensor:
    t = logw.tensor if isinstance(logw, LogWeightMatrix) else T.Tensor(np.asarray(logw, dtype=np.float64))
    if t.values.ndim == 2:
        t = T.reshape(t, (1,) + t.values.shape)
    if t.values.ndim != 3:
        raise ConfigError(f"log-weight matrix must be (M, K) or (B, M, K), got {t.values.shape}")
    return t


def _vae_term(t: T.Tensor) -> T.Tensor:
    return T.tmean(t)


def _iwae_term(t: T.Tensor) -> T.Tensor:
    if t.shape[1] != 1:
        raise ConfigError("iwae needs M == 1; use miwae for M > 1")
    return T.tmean(T.log_mean_exp(t, axis=2))


def _miwae_term(t: T.Tensor) -> T.Tensor:
    return T.tmean(T.log_mean_exp(t, axis=2))


def elbo_vae(logw) -> float:
    """Monte Carlo mean of log w over every entry."""
    return float(_vae_term(_coerce(logw)))


def elbo_iwae(logw) -> float:
    """log-mean-exp over the K axis; batch-averaged. Requires M == 1."""
    return float(_iwae_term(_coerce(logw)))


def elbo_miwae(logw) -> float:
    """Mean over the M groups of per-group log-mean-exp over K."""
    return float(_miwae_term(_coerce(logw)))


def elbo_ciwae(logw, beta: float) -> float:
    """Convex combination beta * vae + (1 - beta) * iwae on shared weights."""
    if not 0.0 <= beta <= 1.0:
        raise ConfigError(f"beta must lie in [0, 1], got {beta}")
    t = _coerce(logw)
    return beta * float(_vae_term(t)) + (1.0 - beta) * float(_iwae_term(t))


def iwae_per_item(values: np.ndarray) -> np.ndarray:
    """Per-item log-mean-exp over the trailing sample axis (no batch mean)."""
    values = np.asarray(values, dtype=np.float64)
    m = np.max(values, axis=-1, keepdims=True)
    m_safe = np.where(np.isneginf(m), 0.0, m)
    with np.errstate(divide="ignore"):
        out = m_safe.squeeze(-1) + np.log(np.exp(values - m_safe).mean(axis=-1))
    return out


def sample_log_weights(
    params: M.ModelParams,
    x: np.ndarray,
    m_groups: int,
    k_samples: int,
    rng: np.random.Generator,
    noise: np.ndarray | None = None,
) -> LogWeightMatrix:
    """One encode per item, M*K reparameterized samples, recorded on a tape.

    ``noise`` may be injected (shape (B, M, K, D)) to share samples across
    estimators in identity tests; otherwise it is drawn from ``rng``.
    """
    x = np.asarray(x, dtype=np.float64)
    b = x.shape[0]
    d = params.config.latent_dim
    if noise is None:
        noise = rng.standard_normal((b, m_groups, k_samples, d))

    def build():
        q = M.encode(params, x)
        z = M.reparameterize(q, noise)
        return M.log_weight(params, x, z, q)

    # Join an enclosing tape when one is active (so callers can compose
    # further objectives on it); otherwise open a fresh per-batch tape.
    outer = T._active_tape()
    if outer is not None:
        return LogWeightMatrix(tensor=build(), tape=outer)
    with T.Tape() as tape:
        logw = build()
    return LogWeightMatrix(tensor=logw, tape=tape)


def _objective_tensor(config: BoundConfig, t: T.Tensor) -> T.Tensor:
    if config.family == "vae":
        return _vae_term(t)
    if config.family == "iwae":
        return _iwae_term(t)
    if config.family == "miwae":
        return _miwae_term(t)
    if config.family == "ciwae":
        beta = config.effective_beta()
        return _vae_term(t) * beta + _iwae_term(t) * (1.0 - beta)
    raise ConfigError(f"gradients() does not route family {config.family!r}; use gradients_piwae")


def _split_groups(params: M.ModelParams, grad_map: dict[T.Tensor, np.ndarray]):
    grad_phi = {n: grad_map[t] for n, t in params.phi.items() if t in grad_map}
    grad_theta = {n: grad_map[t] for n, t in params.theta.items() if t in grad_map}
    return grad_phi, grad_theta


def gradients(config: BoundConfig, logw: LogWeightMatrix, params: M.ModelParams) -> GradEstimate:
    """Backward pass through the family objective for vae/iwae/miwae/ciwae.

    Consumes the tape carried by ``logw``. For learnable-beta ciwae the
    beta derivative is also filled in (from the two bound values; beta is
    held constant inside the phi/theta objective).
    """
    if logw.tape is None:
        raise T.TapeError("log-weight matrix carries no tape")
    # The objective composition must be recorded on the same tape.
    with logw.tape:
        objective = _objective_tensor(config, _coerce(logw))
    grad_map = T.backward(objective, logw.tape)
    grad_phi, grad_theta = _split_groups(params, grad_map)
    gb = grad_beta(logw, config.beta_raw) if config.learnable_beta else None
    return GradEstimate(
        grad_phi=grad_phi,
        grad_theta=grad_theta,
        objective_value=float(objective),
        grad_beta=gb,
    )


def gradients_piwae(
    params: M.ModelParams,
    x: np.ndarray,
    m_groups: int,
    l_samples: int,
    k_samples: int,
    rng: np.random.Generator,
    noise_inference: np.ndarray | None = None,
    noise_generative: np.ndarray | None = None,
) -> GradEstimate:
    """Dual-target gradients: miwae(M, L) for phi, iwae(1, K) for theta.

    The encoder forward pass is shared between the two targets; the noise
    draws are independent unless injected. The returned maps are strictly
    disjoint: no theta entries from the inference target, no phi entries
    from the generative target.
    """
    x = np.asarray(x, dtype=np.float64)
    b = x.shape[0]
    d = params.config.latent_dim
    if noise_inference is None:
        noise_inference = rng.standard_normal((b, m_groups, l_samples, d))
    if noise_generative is None:
        noise_generative = rng.standard_normal((b, 1, k_samples, d))

    # Inference target: full differentiable path through encoder + decoder.
    with T.Tape() as tape_phi:
        q = M.encode(params, x)
        z_inf = M.reparameterize(q, noise_inference)
        logw_inf = M.log_weight(params, x, z_inf, q)
        obj_phi = _miwae_term(logw_inf)
    grad_phi, _ = _split_groups(params, T.backward(obj_phi, tape_phi))

    # Generative target: reuse the encoder outputs as constants. z then has
    # no phi dependence, so the backward pass only reaches theta; the log
    # q and prior terms still contribute their values to the weights.
    q_const = M.DiagGaussian(mu=T.Tensor(q.mu.values), log_var=T.Tensor(q.log_var.values))
    with T.Tape() as tape_theta:
        z_gen = M.reparameterize(q_const, noise_generative)
        logw_gen = M.log_weight(params, x, z_gen, q_const)
        obj_theta = _iwae_term(logw_gen)
    _, grad_theta = _split_groups(params, T.backward(obj_theta, tape_theta))

    return GradEstimate(
        grad_phi=grad_phi,
        grad_theta=grad_theta,
        objective_value=float(obj_theta),
        extras={"objective_phi": float(obj_phi)},
    )


def grad_beta(logw, beta_raw: float) -> float:
    """d/d(beta_raw) of the *negated* combination objective.

    With beta = logistic(beta_raw), this is
    (elbo_iwae - elbo_vae) * beta * (1 - beta): positive whenever the
    tight bound exceeds the loose one, which under gradient descent moves
    beta toward the iwae end. Saturates to zero for |beta_raw| large.
    """
    t = _coerce(logw)
    beta = _logistic(beta_raw)
    vae_val = float(_vae_term(t))
    iwae_val = float(_iwae_term(t))
    return (iwae_val - vae_val) * beta * (1.0 - beta)
