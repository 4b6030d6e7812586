"""Dense float64 tensors with reverse-mode differentiation.

Small on purpose: exactly the primitives needed for two-hidden-layer
perceptrons, Gaussian reparameterization, Bernoulli log-likelihoods from
logits, and row-wise log-mean-exp reductions. Operations record onto an
explicit :class:`Tape`; calling :func:`backward` replays the tape in
reverse and accumulates gradients.

Everything is 64-bit. Any operation whose output contains NaN or +/-Inf
raises :class:`NumericError` instead of propagating the poison (the one
sanctioned exception: ``log_mean_exp`` accepts -Inf *inputs*, which
represent log-of-zero weights, and still produces finite output when a
row has at least one finite entry).
"""

from __future__ import annotations

import numpy as np


class ShapeMismatchError(ValueError):
    """Operand shapes do not conform."""


class NumericError(ArithmeticError):
    """An operation produced NaN or Inf."""


class EmptyReductionError(ValueError):
    """Reduction over a zero-length axis."""


class TapeError(RuntimeError):
    """Tape misuse: consumed twice, or backward on a tape-less value."""


class Tensor:
    """A dense n-d float64 array, optionally carrying a gradient slot.

    ``grad`` exists only when ``requires_grad`` is set; it accumulates
    across backward passes (callers zero it explicitly if they reuse a
    parameter tensor).
    """

    __slots__ = ("values", "requires_grad", "grad")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.values) if self.requires_grad else None

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeMismatchError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def __float__(self) -> float:
        return self.item()

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Arithmetic sugar; scalars are promoted to constant tensors.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division only supported by python scalars")
        return mul(self, _as_tensor(1.0 / other))

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


class Tape:
    """Ordered record of primitive operations for one backward pass.

    Use as a context manager; ops executed inside record themselves when
    any input is differentiable. A tape may be consumed (via
    :func:`backward`) exactly once.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], object]] = []
        self._tracked: set[int] = set()
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def _tracks(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._tracked

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_rule) -> None:
        self._records.append((out, inputs, backward_rule))
        self._tracked.add(id(out))

    def __len__(self) -> int:
        return len(self._records)


_TAPE_STACK: list[Tape] = []


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _record(out_values: np.ndarray, inputs: tuple[Tensor, ...], backward_rule) -> Tensor:
    out = Tensor(out_values)
    tape = _active_tape()
    if tape is not None and any(tape._tracks(t) for t in inputs):
        tape.record(out, inputs, backward_rule)
    return out


def _ensure_finite(values: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(values).all():
        raise NumericError(f"{op} produced non-finite values")
    return values


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(loss: Tensor, tape: Tape) -> dict[Tensor, np.ndarray]:
    """Reverse-replay the tape from a scalar loss.

    Returns the gradient map for every ``requires_grad`` tensor reachable
    from the loss, and adds the same gradients into their ``.grad``
    accumulators. Fan-out accumulates additively; replay order is the
    recorded order, so results are bit-reproducible.
    """
    if loss.values.size != 1:
        raise ShapeMismatchError("backward requires a scalar loss")
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward pass")
    if id(loss) not in tape._tracked:
        raise TapeError("loss was not produced under this tape")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    result: dict[Tensor, np.ndarray] = {}
    for out, inputs, rule in reversed(tape._records):
        g_out = grads.pop(id(out), None)
        if g_out is None:
            continue
        for inp, g_in in zip(inputs, rule(g_out)):
            if g_in is None:
                continue
            if not (inp.requires_grad or id(inp) in tape._tracked):
                continue
            if id(inp) in grads:
                grads[id(inp)] += g_in
            else:
                grads[id(inp)] = g_in.copy() if g_in.base is not None or g_in is g_out else g_in
            if inp.requires_grad:
                result[inp] = grads[id(inp)]
    for t, g in result.items():
        t.grad += g
    return result


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = _ensure_finite(a.values + b.values, "add")

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), rule)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = _ensure_finite(a.values - b.values, "sub")

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(out, (a, b), rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = _ensure_finite(a.values * b.values, "mul")

    def rule(g):
        return _unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)

    return _record(out, (a, b), rule)


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Fused ``x @ weight + bias`` for a 2-d batch.

    Shapes: x is (B, I), weight (I, O), bias (O,). The fused form keeps the
    tape short for the hot path through encoder/decoder layers.
    """
    if x.values.ndim != 2 or weight.values.ndim != 2 or bias.values.ndim != 1:
        raise ShapeMismatchError(
            f"affine expects 2-d input, 2-d weight, 1-d bias; got "
            f"{x.shape}, {weight.shape}, {bias.shape}"
        )
    if x.shape[1] != weight.shape[0] or weight.shape[1] != bias.shape[0]:
        raise ShapeMismatchError(
            f"affine shapes do not conform: {x.shape} @ {weight.shape} + {bias.shape}"
        )
    out = _ensure_finite(x.values @ weight.values + bias.values, "affine")

    def rule(g):
        return g @ weight.values.T, x.values.T @ g, g.sum(axis=0)

    return _record(out, (x, weight, bias), rule)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.values)

    def rule(g):
        return (g * (1.0 - out * out),)

    return _record(_ensure_finite(out, "tanh"), (x,), rule)


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid_values(x.values)

    def rule(g):
        return (g * out * (1.0 - out),)

    return _record(_ensure_finite(out, "sigmoid"), (x,), rule)


def _sigmoid_values(v: np.ndarray) -> np.ndarray:
    # Stable in both tails: never exponentiates a large positive argument.
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), computed as logaddexp(0, x) so |x| ~ 700 stays exact."""
    out = np.logaddexp(0.0, x.values)

    def rule(g):
        return (g * _sigmoid_values(x.values),)

    return _record(_ensure_finite(out, "softplus"), (x,), rule)


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = _ensure_finite(np.exp(x.values), "exp")

    def rule(g):
        return (g * out,)

    return _record(out, (x,), rule)


def square(x: Tensor) -> Tensor:
    out = _ensure_finite(x.values * x.values, "square")

    def rule(g):
        return (g * (2.0 * x.values),)

    return _record(out, (x,), rule)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    out = x.values.reshape(shape)

    def rule(g):
        return (g.reshape(x.shape),)

    return _record(out, (x,), rule)


def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.values.ndim)
    out = _ensure_finite(x.values.sum(axis=axes, keepdims=keepdims), "sum")

    def rule(g):
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axes)
        return (np.broadcast_to(gg, x.shape),)

    return _record(out, (x,), rule)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.values.ndim)
    n = int(np.prod([x.shape[a] for a in axes]))
    if n == 0:
        raise EmptyReductionError("mean over an empty axis")
    out = _ensure_finite(x.values.mean(axis=axes, keepdims=keepdims), "mean")

    def rule(g):
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axes)
        return (np.broadcast_to(gg, x.shape) / n,)

    return _record(out, (x,), rule)


def log_mean_exp(x: Tensor, axis: int = -1) -> Tensor:
    """Row-wise log((1/K) sum exp) with max-shift stabilization.

    The backward rule is the self-normalized weight map: the Jacobian row
    for each reduced slice is softmax(x) along the reduction axis, which
    sums to one. -Inf entries are treated as exactly-zero weights and
    receive zero gradient; a slice that is entirely -Inf has no finite
    mean and raises :class:`NumericError`.
    """
    ax = axis % x.values.ndim
    k = x.shape[ax]
    if k == 0:
        raise EmptyReductionError("log_mean_exp over an empty axis")
    v = x.values
    if np.isnan(v).any() or np.isposinf(v).any():
        raise NumericError("log_mean_exp received NaN or +Inf input")
    m = np.max(v, axis=ax, keepdims=True)
    m_safe = np.where(np.isneginf(m), 0.0, m)
    shifted = np.exp(v - m_safe)
    total = shifted.sum(axis=ax, keepdims=True)
    with np.errstate(divide="ignore"):
        out_keep = m_safe + np.log(total) - np.log(k)
    out = _ensure_finite(np.squeeze(out_keep, axis=ax), "log_mean_exp")
    weights = shifted / total

    def rule(g):
        return (np.expand_dims(g, ax) * weights,)

    return _record(out, (x,), rule)


def softmax_weights(values: np.ndarray, axis: int = -1) -> np.ndarray:
    """Self-normalized importance weights of an array of log-weights."""
    m = np.max(values, axis=axis, keepdims=True)
    e = np.exp(values - np.where(np.isneginf(m), 0.0, m))
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------

def finite_diff_check(f, params: list[Tensor], step: float = 1e-5) -> float:
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` must be a deterministic scalar-producing closure over ``params``
    (fix any noise inputs before calling). Returns the maximum over all
    parameter coordinates of ``|analytic - numeric| / (|numeric| + 1e-12)``.
    """
    with Tape() as tape:
        loss = f()
    grad_map = backward(loss, tape)

    worst = 0.0
    for p in params:
        analytic = grad_map.get(p)
        if analytic is None:
            analytic = np.zeros_like(p.values)
        flat = p.values.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(f().values.reshape(()))
            flat[i] = orig - step
            f_minus = float(f().values.reshape(()))
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            err = abs(analytic.reshape(-1)[i] - numeric) / (abs(numeric) + 1e-12)
            worst = max(worst, err)
    return worst
