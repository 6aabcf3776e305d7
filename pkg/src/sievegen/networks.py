"""Sparse feed-forward networks ``W_L rho_{v_L} ... W_1 rho_{v_1} W_0 z``.

Hidden layer ``j`` owns a shift vector ``v_j`` subtracted before the
activation; the final affine map carries no shift.  Parameters are addressed
in the flat order ``W_0, v_1, W_1, ..., v_L, W_L`` (row-major), which is also
the order used for pruning tie-breaks.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .numerics import DEFAULT_LEAKY_SLOPE, ShapeError, Tape, Var, activation, var_activation

ACTIVATIONS = ("relu", "leaky_relu")


@dataclass(frozen=True)
class MLPSpec:
    widths: tuple[int, ...]
    activation: str = "leaky_relu"
    slope: float = DEFAULT_LEAKY_SLOPE

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2:
            raise ValueError(f"need at least input and output widths, got {self.widths}")
        if min(self.widths) < 1:
            raise ValueError(f"all widths must be >= 1, got {self.widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.activation == "leaky_relu" and not 0.0 < self.slope < 1.0:
            raise ValueError(f"leaky slope must lie in (0, 1), got {self.slope}")

    @property
    def depth(self) -> int:
        return len(self.widths) - 2

    @property
    def input_dim(self) -> int:
        return self.widths[0]

    @property
    def output_dim(self) -> int:
        return self.widths[-1]

    def shapes(self) -> list[tuple[int, ...]]:
        """Parameter shapes in flat order."""
        p = self.widths
        out: list[tuple[int, ...]] = [(p[1], p[0])]
        for j in range(1, self.depth + 1):
            out.append((p[j],))
            out.append((p[j + 1], p[j]))
        return out

    def n_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.shapes())

    def to_dict(self) -> dict:
        return {"widths": list(self.widths), "activation": self.activation, "slope": self.slope}

    @classmethod
    def from_dict(cls, d: dict) -> "MLPSpec":
        return cls(tuple(d["widths"]), d.get("activation", "leaky_relu"), d.get("slope", DEFAULT_LEAKY_SLOPE))


@dataclass
class MLP:
    spec: MLPSpec
    weights: list[np.ndarray]
    shifts: list[np.ndarray]

    def __post_init__(self):
        p = self.spec.widths
        L = self.spec.depth
        if len(self.weights) != L + 1 or len(self.shifts) != L:
            raise ShapeError(f"expected {L + 1} weights and {L} shifts for widths {p}")
        for j, W in enumerate(self.weights):
            if W.shape != (p[j + 1], p[j]):
                raise ShapeError(f"W_{j} has shape {W.shape}, expected {(p[j + 1], p[j])}")
        for j, v in enumerate(self.shifts, start=1):
            if v.shape != (p[j],):
                raise ShapeError(f"v_{j} has shape {v.shape}, expected {(p[j],)}")

    def arrays(self) -> list[np.ndarray]:
        out = [self.weights[0]]
        for v, W in zip(self.shifts, self.weights[1:]):
            out += [v, W]
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for a in self.arrays()])

    @classmethod
    def from_flat(cls, spec: MLPSpec, theta: np.ndarray) -> "MLP":
        arrays = unflatten(spec, theta)
        return cls(spec, arrays[0::2], arrays[1::2])

    def copy(self) -> "MLP":
        return MLP(self.spec, [W.copy() for W in self.weights], [v.copy() for v in self.shifts])

    def __call__(self, z) -> np.ndarray:
        return forward(self, z)

    def nonzero_count(self) -> int:
        return int(np.count_nonzero(self.flat()))

    def max_entry_norm(self) -> float:
        return float(np.max(np.abs(self.flat())))

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "weights": [W.tolist() for W in self.weights],
            "shifts": [v.tolist() for v in self.shifts],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MLP":
        spec = MLPSpec.from_dict(d["spec"])
        weights = [np.array(W, dtype=np.float64).reshape(spec.widths[j + 1], spec.widths[j])
                   for j, W in enumerate(d["weights"])]
        shifts = [np.array(v, dtype=np.float64).reshape(-1) for v in d["shifts"]]
        return cls(spec, weights, shifts)


def unflatten(spec: MLPSpec, theta: np.ndarray) -> list[np.ndarray]:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (spec.n_params(),):
        raise ShapeError(f"flat vector of length {theta.shape} for {spec.n_params()} parameters")
    out, k = [], 0
    for shp in spec.shapes():
        n = int(np.prod(shp))
        out.append(theta[k:k + n].reshape(shp))
        k += n
    return out


def init_mlp(spec: MLPSpec, seed) -> MLP:
    """He-normal weights (std sqrt(2 / fan_in)) and zero shifts."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    p = spec.widths
    weights = [rng.standard_normal((p[j + 1], p[j])) * np.sqrt(2.0 / p[j]) for j in range(spec.depth + 1)]
    shifts = [np.zeros(p[j]) for j in range(1, spec.depth + 1)]
    return MLP(spec, weights, shifts)


def forward(net: MLP, z) -> np.ndarray:
    """Evaluate on a single vector or a batch of row vectors."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    h = z[None, :] if single else z
    if h.ndim != 2 or h.shape[1] != net.spec.input_dim:
        raise ShapeError(f"input of shape {z.shape} for a network with input dim {net.spec.input_dim}")
    h = h @ net.weights[0].T
    for v, W in zip(net.shifts, net.weights[1:]):
        h = activation(net.spec.activation, h, v, net.spec.slope)
        h = h @ W.T
    return h[0] if single else h


def forward_var(spec: MLPSpec, params: Sequence[Var], z) -> Var:
    """Tape version of :func:`forward`; ``params`` in flat order, ``z`` batched."""
    W0 = params[0]
    tape = W0.tape
    h = z if isinstance(z, Var) else tape.constant(z)
    if h.value.ndim != 2 or h.shape[1] != spec.input_dim:
        raise ShapeError(f"input of shape {h.shape} for a network with input dim {spec.input_dim}")
    h = h @ W0.T
    for j in range(spec.depth):
        v, W = params[1 + 2 * j], params[2 + 2 * j]
        h = var_activation(spec.activation, h, v, spec.slope)
        h = h @ W.T
    return h


def leaves_for(tape: Tape, net: MLP) -> list[Var]:
    return [tape.leaf(a) for a in net.arrays()]


def operator_norm_product(net: MLP) -> float:
    return float(np.prod([np.linalg.norm(W, 2) for W in net.weights]))


def sup_norm_on_sample(net: MLP, z) -> float:
    return float(np.max(np.abs(forward(net, z))))


# ---------------------------------------------------------------------------
# magnitude pruning


@dataclass(frozen=True)
class PruneMask:
    keep: np.ndarray = field(repr=False)

    @property
    def zero_fraction(self) -> float:
        return float(np.count_nonzero(~self.keep)) / self.keep.size if self.keep.size else 0.0

    @property
    def n_zero(self) -> int:
        return int(np.count_nonzero(~self.keep))

    @classmethod
    def full(cls, n: int) -> "PruneMask":
        return cls(np.ones(n, dtype=bool))

    def apply(self, theta: np.ndarray) -> np.ndarray:
        return np.where(self.keep, theta, 0.0)

    def to_list(self) -> list[int]:
        return self.keep.astype(int).tolist()

    @classmethod
    def from_list(cls, xs) -> "PruneMask":
        return cls(np.asarray(xs, dtype=bool))


def prune_flat(theta: np.ndarray, total_fraction: float, prior: np.ndarray | None = None) -> np.ndarray:
    """Keep-mask flagging exactly ``floor(total_fraction * n)`` entries.

    Entries are taken in order of absolute value with ties broken by
    ascending index, so entries that are already zero count toward the target
    first.  Entries flagged in the ``prior`` keep-mask go before everything
    else, which keeps successive rounds nested.
    """
    if not 0.0 <= total_fraction <= 1.0:
        raise ValueError(f"prune fraction must lie in [0, 1], got {total_fraction}")
    theta = np.asarray(theta, dtype=np.float64)
    n = theta.size
    target = int(np.floor(total_fraction * n))
    keep = np.ones(n, dtype=bool)
    if prior is not None:
        prior = np.asarray(prior, dtype=bool)
        if prior.shape != theta.shape:
            raise ShapeError(f"prior mask of shape {prior.shape} for {theta.shape} parameters")
        target = max(target, int(np.count_nonzero(~prior)))
        order = np.lexsort((np.arange(n), np.abs(theta), prior))
    else:
        order = np.argsort(np.abs(theta), kind="stable")
    keep[order[:target]] = False
    return keep


def prune_round(net: MLP, total_fraction: float, mask: PruneMask | None = None) -> tuple[MLP, PruneMask]:
    theta = net.flat()
    new = PruneMask(prune_flat(theta, total_fraction, None if mask is None else mask.keep))
    return MLP.from_flat(net.spec, new.apply(theta)), new


def apply_mask(grad, mask: PruneMask) -> np.ndarray:
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != mask.keep.shape:
        raise ShapeError(f"gradient of shape {grad.shape} for mask of shape {mask.keep.shape}")
    return np.where(mask.keep, grad, 0.0)
