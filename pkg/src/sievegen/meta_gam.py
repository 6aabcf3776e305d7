"""Additive summaries of a fitted generator.

Each output coordinate ``f_j`` is projected by least squares onto functions
of the form ``c_j + sum_l g_jl(z_l)`` using latent draws ``z_i ~ P_Z``.  The
one-dimensional components are piecewise linear on a uniform knot grid,
continue the end segments linearly beyond the outer knots (so affine maps are
represented exactly), are centred over the latent sample, and are stored as
their values at the knots.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .numerics import ShapeError

RIDGE = 1e-8
MAX_CONDITION = 1e8
QUANTILES = (0.005, 0.995)


class RankDeficientError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class BasisSpec:
    """Knot layout; ``ranges=None`` derives per-dimension ranges from the latent sample."""

    knots_per_dim: int = 32
    ranges: tuple[tuple[float, float], ...] | None = None

    def __post_init__(self):
        if self.knots_per_dim < 2:
            raise ValueError(f"need at least 2 knots per dimension, got {self.knots_per_dim}")
        if self.ranges is not None:
            rs = tuple((float(lo), float(hi)) for lo, hi in self.ranges)
            for lo, hi in rs:
                if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
                    raise ValueError(f"invalid knot range [{lo}, {hi}]")
            object.__setattr__(self, "ranges", rs)

    def knots(self, Z: np.ndarray) -> np.ndarray:
        """(d, knots_per_dim) grid, from ``ranges`` or the latent quantiles."""
        d = Z.shape[1]
        if self.ranges is not None:
            if len(self.ranges) != d:
                raise ShapeError(f"{len(self.ranges)} ranges for latent dimension {d}")
            lohi = np.array(self.ranges)
        else:
            lohi = np.quantile(Z, QUANTILES, axis=0).T
            if not np.all(np.isfinite(lohi)) or np.any(lohi[:, 1] <= lohi[:, 0]):
                raise ValueError(f"degenerate latent sample ranges {lohi.tolist()}")
        return np.stack([np.linspace(lo, hi, self.knots_per_dim) for lo, hi in lohi])


def _locate(z: np.ndarray, knots: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Segment index and local coordinate; outside the grid ``t`` leaves [0, 1]."""
    k = len(knots)
    h = (knots[-1] - knots[0]) / (k - 1)
    pos = (z - knots[0]) / h
    i = np.clip(np.floor(pos).astype(int), 0, k - 2)
    return i, pos - i


def piecewise_linear(z, knots: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Interpolate ``values`` at uniform ``knots``, extending the end segments linearly."""
    z = np.asarray(z, dtype=np.float64)
    i, t = _locate(z, knots)
    return (1.0 - t) * values[i] + t * values[i + 1]


def hat_basis(z: np.ndarray, knots: np.ndarray) -> np.ndarray:
    """(n, k) matrix of piecewise-linear hat functions at sorted uniform ``knots``."""
    z = np.asarray(z, dtype=np.float64)
    k = len(knots)
    i, t = _locate(z, knots)
    B = np.zeros((len(z), k))
    rows = np.arange(len(z))
    B[rows, i] = 1.0 - t
    B[rows, i + 1] += t
    return B


@dataclass
class GAMFit:
    knots: np.ndarray          # (d, k)
    coefficients: np.ndarray   # (D, d, k): g_jl at the knots
    intercepts: np.ndarray     # (D,)
    rss: np.ndarray = field(default_factory=lambda: np.zeros(0))
    rss_null: np.ndarray = field(default_factory=lambda: np.zeros(0))
    n_samples: int = 0
    seed: int | None = None

    @property
    def latent_dim(self) -> int:
        return self.knots.shape[0]

    @property
    def output_dim(self) -> int:
        return self.intercepts.shape[0]

    def component(self, j: int, l: int, z) -> np.ndarray:
        return piecewise_linear(z, self.knots[l], self.coefficients[j, l])

    def __call__(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 1
        Z = z[None, :] if single else z
        if Z.ndim != 2 or Z.shape[1] != self.latent_dim:
            raise ShapeError(f"input of shape {z.shape} for an additive map with latent dim {self.latent_dim}")
        out = np.tile(self.intercepts, (len(Z), 1))
        for j in range(self.output_dim):
            for l in range(self.latent_dim):
                out[:, j] += self.component(j, l, Z[:, l])
        return out[0] if single else out

    def to_dict(self) -> dict:
        return {
            "knots": self.knots.tolist(),
            "coefficients": self.coefficients.tolist(),
            "intercepts": self.intercepts.tolist(),
            "rss": np.asarray(self.rss).tolist(),
            "rss_null": np.asarray(self.rss_null).tolist(),
            "n_samples": self.n_samples,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GAMFit":
        return cls(np.array(d["knots"], dtype=np.float64), np.array(d["coefficients"], dtype=np.float64),
                   np.array(d["intercepts"], dtype=np.float64), np.array(d.get("rss", []), dtype=np.float64),
                   np.array(d.get("rss_null", []), dtype=np.float64), int(d.get("n_samples", 0)), d.get("seed"))


def _design(Z: np.ndarray, knots: np.ndarray) -> list[np.ndarray]:
    return [hat_basis(Z[:, l], knots[l]) for l in range(Z.shape[1])]


def fit_additive(Z: np.ndarray, Y: np.ndarray, basis: BasisSpec | None = None) -> GAMFit:
    """Least-squares additive fit of ``Y`` (n, D) on latent points ``Z`` (n, d).

    The first hat of every dimension is dropped so the intercept is
    identified; the remaining normal equations carry a ``1e-8 I`` ridge.
    """
    basis = basis or BasisSpec()
    Z = np.asarray(Z, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if Z.ndim != 2 or len(Z) != len(Y):
        raise ShapeError(f"latent sample {Z.shape} and responses {Y.shape} do not conform")
    n, d = Z.shape
    k = basis.knots_per_dim
    if n < k * d + 1:
        raise ValueError(f"need at least {k * d + 1} latent draws for {d} x {k} basis functions, got {n}")
    knots = basis.knots(Z)
    blocks = _design(Z, knots)
    A = np.hstack([np.ones((n, 1))] + [B[:, 1:] for B in blocks])
    G = A.T @ A
    G[np.diag_indices_from(G)] += RIDGE
    ev = np.linalg.eigvalsh(G)
    if ev[0] <= 0 or ev[-1] / ev[0] > MAX_CONDITION:
        raise RankDeficientError(
            f"additive design is rank deficient (condition {ev[-1] / max(ev[0], 1e-300):.3e}); "
            "some knot intervals hold no latent draws")
    beta = cho_solve(cho_factor(G), A.T @ Y)          # (1 + d(k-1), D)
    resid = Y - A @ beta
    D = Y.shape[1]
    coef = np.zeros((D, d, k))
    intercepts = beta[0].copy()
    for l in range(d):
        coef[:, l, 1:] = beta[1 + l * (k - 1):1 + (l + 1) * (k - 1)].T
        means = (blocks[l] @ coef[:, l, :].T).mean(axis=0)
        coef[:, l, :] -= means[:, None]
        intercepts += means
    rss = np.sum(resid**2, axis=0)
    rss_null = np.sum((Y - Y.mean(axis=0)) ** 2, axis=0)
    return GAMFit(knots, coef, intercepts, rss, rss_null, n)


def fit_gam(model: Callable[[np.ndarray], np.ndarray], sampler, N: int = 10_000,
            basis: BasisSpec | None = None, seed: int = 0) -> GAMFit:
    """Draw ``N`` latent points from ``sampler`` and fit the additive projection of ``model``."""
    rng = np.random.default_rng(seed)
    Z = sampler.sample(rng, N)
    fit = fit_additive(Z, model(Z), basis)
    fit.seed = seed
    return fit


def gam_generator(fit: GAMFit) -> GAMFit:
    """The fitted additive map; it is directly callable on vectors or batches."""
    if fit.coefficients.shape != (fit.output_dim, fit.latent_dim, fit.knots.shape[1]):
        raise ShapeError(f"coefficients of shape {fit.coefficients.shape} do not match knots {fit.knots.shape}")
    return fit


def constant_fit(intercepts: Sequence[float], knots: np.ndarray) -> GAMFit:
    knots = np.asarray(knots, dtype=np.float64)
    c = np.asarray(intercepts, dtype=np.float64)
    return GAMFit(knots, np.zeros((len(c), *knots.shape)), c)


def save_fit(path, fit: GAMFit) -> None:
    Path(path).write_text(json.dumps(fit.to_dict()))


def load_fit(path) -> GAMFit:
    return GAMFit.from_dict(json.loads(Path(path).read_text()))


def write_components_csv(path, fit: GAMFit) -> None:
    """Long format: one row per (j, l, knot) with columns j, l, z_grid, g_jl."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["j", "l", "z_grid", "g_jl"])
        for j in range(fit.output_dim):
            for l in range(fit.latent_dim):
                for z, g in zip(fit.knots[l], fit.coefficients[j, l]):
                    w.writerow([j + 1, l + 1, repr(float(z)), repr(float(g))])
