"""Float64 array helpers, a define-by-run reverse-mode tape, and Adam.

The tape records numpy-array valued primitives.  Each recorded node keeps its
forward value, the indices of its inputs and a vector-Jacobian product used by
the reverse sweep.  A fresh tape is built for every mini-batch.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

DEFAULT_LEAKY_SLOPE = 0.01


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def _as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# plain array operations


def affine(W, x, v=None) -> np.ndarray:
    """Return ``W @ x``.

    ``v`` is the shift of the activation that follows this affine map; it is
    only checked against the output size and applied later by
    :func:`activation`.
    """
    W = _as_f64(W)
    x = _as_f64(x)
    if W.ndim != 2 or x.ndim != 1 or W.shape[1] != x.shape[0]:
        raise ShapeError(f"cannot apply W of shape {W.shape} to x of shape {x.shape}")
    if v is not None:
        v = _as_f64(v)
        if v.shape != (W.shape[0],):
            raise ShapeError(f"shift of shape {v.shape} does not match W of shape {W.shape}")
    return W @ x


def activation(kind: str, x, shift=None, slope: float = DEFAULT_LEAKY_SLOPE) -> np.ndarray:
    x = _as_f64(x)
    s = x if shift is None else x - _check_same(x, shift)
    if kind == "relu":
        return np.maximum(s, 0.0)
    if kind == "leaky_relu":
        if not 0.0 < slope < 1.0:
            raise ValueError(f"leaky slope must lie in (0, 1), got {slope}")
        return np.where(s > 0.0, s, slope * s)
    raise ValueError(f"unknown activation {kind!r}")


def _check_same(x: np.ndarray, shift) -> np.ndarray:
    shift = _as_f64(shift)
    if shift.ndim == 0:
        return shift
    if shift.shape[-1] != x.shape[-1]:
        raise ShapeError(f"shift of shape {shift.shape} does not match input of shape {x.shape}")
    return shift


def logsumexp(values, axis=None, keepdims: bool = False):
    """log(sum(exp(values))) with the maximum subtracted first.

    Entries may be ``-inf``; an all ``-inf`` slice returns ``-inf``.
    """
    a = _as_f64(values)
    if a.size == 0:
        raise ValueError("logsumexp of an empty array")
    m = np.max(a, axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m_safe), axis=axis, keepdims=True)) + m_safe
    if not keepdims:
        out = np.squeeze(out, axis=axis) if axis is not None else out.reshape(())
    if out.ndim == 0:
        return float(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# tape


class Tape:
    """Linear record of primitive operations in topological order."""

    def __init__(self) -> None:
        self.values: list[np.ndarray] = []
        self.parents: list[tuple[int, ...]] = []
        self.vjps: list[Callable | None] = []
        self.leaves: list[int] = []
        self.adjoints: list[np.ndarray | None] = []

    def __len__(self) -> int:
        return len(self.values)

    def _push(self, value, parents: tuple[int, ...] = (), vjp: Callable | None = None) -> "Var":
        self.values.append(_as_f64(value))
        self.parents.append(parents)
        self.vjps.append(vjp)
        return Var(self, len(self.values) - 1)

    def leaf(self, value) -> "Var":
        """Register a differentiable input."""
        var = self._push(np.array(value, dtype=np.float64))
        self.leaves.append(var.index)
        return var

    def constant(self, value) -> "Var":
        return self._push(value)

    def backward(self, output: "Var | None" = None) -> list[np.ndarray]:
        """Reverse sweep from a scalar ``output``; returns one gradient per leaf."""
        if not self.values:
            raise ValueError("empty tape")
        out = len(self.values) - 1 if output is None else output.index
        if self.values[out].size != 1:
            raise ShapeError(f"backward needs a scalar output, got shape {self.values[out].shape}")
        adj: list[np.ndarray | None] = [None] * len(self.values)
        adj[out] = np.ones_like(self.values[out])
        for i in range(out, -1, -1):
            g = adj[i]
            vjp = self.vjps[i]
            if g is None or vjp is None:
                continue
            for p, gp in zip(self.parents[i], vjp(g)):
                if gp is None:
                    continue
                adj[p] = gp if adj[p] is None else adj[p] + gp
        self.adjoints = adj
        return [adj[i] if adj[i] is not None else np.zeros_like(self.values[i]) for i in self.leaves]


def backward(tape: Tape, output: "Var | None" = None) -> list[np.ndarray]:
    return tape.backward(output)


def _lift(tape: Tape, x) -> "Var":
    if isinstance(x, Var):
        if x.tape is not tape:
            raise ValueError("operands live on different tapes")
        return x
    return tape.constant(x)


class Var:
    """Handle to one node of a :class:`Tape`."""

    __slots__ = ("tape", "index")
    __array_ufunc__ = None

    def __init__(self, tape: Tape, index: int) -> None:
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.index]

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(#{self.index}, shape={self.shape})"

    # -- binary arithmetic with broadcasting
    def _binary(self, other, fwd, da, db, swap=False):
        t = self.tape
        a, b = (self, _lift(t, other)) if not swap else (_lift(t, other), self)
        av, bv = a.value, b.value
        out = fwd(av, bv)
        sa, sb = av.shape, bv.shape

        def vjp(g):
            return _unbroadcast(da(g, av, bv, out), sa), _unbroadcast(db(g, av, bv, out), sb)

        return t._push(out, (a.index, b.index), vjp)

    def __add__(self, other):
        return self._binary(other, np.add, lambda g, a, b, o: g, lambda g, a, b, o: g)

    def __radd__(self, other):
        return self._binary(other, np.add, lambda g, a, b, o: g, lambda g, a, b, o: g, swap=True)

    def __sub__(self, other):
        return self._binary(other, np.subtract, lambda g, a, b, o: g, lambda g, a, b, o: -g)

    def __rsub__(self, other):
        return self._binary(other, np.subtract, lambda g, a, b, o: g, lambda g, a, b, o: -g, swap=True)

    def __mul__(self, other):
        return self._binary(other, np.multiply, lambda g, a, b, o: g * b, lambda g, a, b, o: g * a)

    def __rmul__(self, other):
        return self._binary(
            other, np.multiply, lambda g, a, b, o: g * b, lambda g, a, b, o: g * a, swap=True
        )

    def __truediv__(self, other):
        return self._binary(
            other, np.divide, lambda g, a, b, o: g / b, lambda g, a, b, o: -g * o / b
        )

    def __rtruediv__(self, other):
        return self._binary(
            other, np.divide, lambda g, a, b, o: g / b, lambda g, a, b, o: -g * o / b, swap=True
        )

    def __neg__(self):
        return self.tape._push(-self.value, (self.index,), lambda g: (-g,))

    def __matmul__(self, other):
        t = self.tape
        b = _lift(t, other)
        av, bv = self.value, b.value
        if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
            raise ShapeError(f"matmul of shapes {av.shape} and {bv.shape}")
        return t._push(av @ bv, (self.index, b.index), lambda g: (g @ bv.T, av.T @ g))

    def __rmatmul__(self, other):
        return _lift(self.tape, other) @ self

    # -- unary primitives
    def _unary(self, out, dfn):
        x = self.value
        return self.tape._push(out, (self.index,), lambda g: (dfn(g, x, out),))

    def exp(self):
        return self._unary(np.exp(self.value), lambda g, x, o: g * o)

    def log(self):
        return self._unary(np.log(self.value), lambda g, x, o: g / x)

    def square(self):
        return self._unary(self.value * self.value, lambda g, x, o: 2.0 * g * x)

    def relu(self, shift=None):
        if isinstance(shift, Var):
            return (self - shift).relu()
        s = self.value if shift is None else self.value - _as_f64(shift)
        mask = s > 0.0
        return self._unary(np.where(mask, s, 0.0), lambda g, x, o: g * mask)

    def leaky_relu(self, shift=None, slope: float = DEFAULT_LEAKY_SLOPE):
        if isinstance(shift, Var):
            return (self - shift).leaky_relu(None, slope)
        s = self.value if shift is None else self.value - _as_f64(shift)
        scale = np.where(s > 0.0, 1.0, slope)
        return self._unary(s * scale, lambda g, x, o: g * scale)

    def clip(self, lo: float, hi: float):
        x = self.value
        inside = (x >= lo) & (x <= hi)
        return self._unary(np.clip(x, lo, hi), lambda g, x, o: g * inside)

    def sum(self, axis=None, keepdims: bool = False):
        x = self.value
        out = np.sum(x, axis=axis, keepdims=keepdims)

        def dfn(g, x, o):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, x.shape).copy()

        return self._unary(out, dfn)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def logsumexp(self, axis=None, keepdims: bool = False):
        x = self.value
        out = np.asarray(logsumexp(x, axis=axis, keepdims=True))

        def dfn(g, x, o):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            with np.errstate(invalid="ignore"):
                w = np.exp(x - out)
            return g * np.nan_to_num(w)

        res = out if keepdims else (out.reshape(()) if axis is None else np.squeeze(out, axis))
        return self._unary(res, dfn)

    def reshape(self, *shape):
        x = self.value
        return self._unary(x.reshape(*shape), lambda g, x, o: g.reshape(x.shape))

    @property
    def T(self):
        return self._unary(self.value.T, lambda g, x, o: g.T)


def var_activation(kind: str, x: Var, shift=None, slope: float = DEFAULT_LEAKY_SLOPE) -> Var:
    """Tape counterpart of :func:`activation`; ``shift`` may itself be a Var."""
    if shift is not None and isinstance(shift, Var):
        x = x - shift
        shift = None
    if kind == "relu":
        return x.relu(shift)
    if kind == "leaky_relu":
        return x.leaky_relu(shift, slope)
    raise ValueError(f"unknown activation {kind!r}")


def gradient(fn: Callable[[Tape, Sequence[Var]], Var], *arrays) -> tuple[float, list[np.ndarray]]:
    """Evaluate ``fn`` on fresh leaves and return ``(value, grads)``."""
    tape = Tape()
    leaves = [tape.leaf(a) for a in arrays]
    out = fn(tape, leaves)
    grads = tape.backward(out)
    return float(out.value), grads


def finite_difference(fn: Callable[..., float], *arrays, h: float = 1e-5) -> list[np.ndarray]:
    """Central differences of a scalar function, one array at a time."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = fn(*arrays)
            flat[i] = old - h
            fm = fn(*arrays)
            flat[i] = old
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def relative_error(a, b, floor: float = 1e-8) -> float:
    a = _as_f64(a)
    b = _as_f64(b)
    den = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / den)) if a.size else 0.0


# ---------------------------------------------------------------------------
# Adam


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def zeros(cls, n: int, **hyper) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n), **hyper)

    def __post_init__(self):
        if self.m.shape != self.v.shape:
            raise ShapeError(f"moment shapes differ: {self.m.shape} vs {self.v.shape}")
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")


def adam_step(state: AdamState, params, grad) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update.  Inputs are never mutated."""
    params = _as_f64(params)
    grad = _as_f64(grad)
    if params.shape != grad.shape or params.shape != state.m.shape:
        raise ShapeError(
            f"params {params.shape}, grad {grad.shape} and state {state.m.shape} must agree"
        )
    bad = np.flatnonzero(~np.isfinite(grad))
    if bad.size:
        raise NonFiniteError(f"non-finite gradient at index {int(bad[0])}: {grad.reshape(-1)[bad[0]]}")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * (grad * grad)
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, replace(state, m=m, v=v, step=t)


def check_finite(x, what: str) -> None:
    x = _as_f64(x)
    if not np.all(np.isfinite(x)):
        idx = int(np.flatnonzero(~np.isfinite(x.reshape(-1)))[0])
        raise NonFiniteError(f"{what}: non-finite entry at flat index {idx}")


__all__ = [
    "AdamState",
    "NonFiniteError",
    "ShapeError",
    "Tape",
    "Var",
    "activation",
    "adam_step",
    "affine",
    "backward",
    "check_finite",
    "finite_difference",
    "gradient",
    "logsumexp",
    "relative_error",
    "var_activation",
]
