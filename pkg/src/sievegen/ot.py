"""Empirical W1 between equal-size point clouds.

The working estimator is log-domain Sinkhorn on the Euclidean cost with an
optional geometric schedule on the regularisation, reporting the transport
cost of the final plan.  Sorting (1-D) and optimal assignment give exact
values for checking it.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .numerics import ShapeError

ASSIGNMENT_LIMIT = 512


class SinkhornConvergenceError(RuntimeError):
    def __init__(self, residual: float, iterations: int, epsilon: float):
        super().__init__(
            f"Sinkhorn did not reach tolerance: residual {residual:.3e} after {iterations} iterations "
            f"(epsilon={epsilon:.3e})"
        )
        self.residual = residual
        self.iterations = iterations
        self.epsilon = epsilon


@dataclass(frozen=True)
class SinkhornConfig:
    """Regularisation settings.

    With ``relative=True`` both ``epsilon`` and ``epsilon_start`` are multiples
    of the median pairwise cost.  ``anneal`` runs stages from ``epsilon_start``
    down to ``epsilon`` by ``factor``, warm-starting the dual potentials.
    ``overrelax`` uses adaptively relaxed updates, and ``newton`` enables the
    second-order polish at the final ``epsilon``.
    """

    epsilon: float = 0.002
    max_iter: int = 5000
    tol: float = 1e-8
    anneal: bool = True
    epsilon_start: float = 0.5
    factor: float = 0.7
    relative: bool = True
    overrelax: bool = True
    newton: bool = True

    def __post_init__(self):
        if not (self.epsilon > 0 and self.tol > 0):
            raise ValueError(f"epsilon and tol must be positive, got {self.epsilon}, {self.tol}")
        if self.anneal and not 0 < self.factor < 1:
            raise ValueError(f"anneal factor must lie in (0, 1), got {self.factor}")


@dataclass
class TransportResult:
    w1_estimate: float
    iterations: int
    marginal_residual: float
    epsilon_final: float
    M: int

    def to_json(self) -> dict:
        return {"w1": self.w1_estimate, "epsilon_final": self.epsilon_final,
                "iterations": self.iterations, "residual": self.marginal_residual, "M": self.M}


def _as_cloud(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    return X[:, None] if X.ndim == 1 else X


def cost_matrix(X, Y) -> np.ndarray:
    """Pairwise Euclidean distances."""
    X, Y = _as_cloud(X), _as_cloud(Y)
    if X.shape[1] != Y.shape[1]:
        raise ShapeError(f"clouds live in different dimensions: {X.shape} vs {Y.shape}")
    return cdist(X, Y)


_EXP_FLOOR = -100.0


def _lse_rows(A: np.ndarray) -> np.ndarray:
    """Row-wise log-sum-exp, overwriting ``A``."""
    m = A.max(axis=1)
    A -= m[:, None]
    # terms below exp(-100) are irrelevant and exp() on them hits slow subnormals
    np.maximum(A, _EXP_FLOOR, out=A)
    np.exp(A, out=A)
    return m + np.log(A.sum(axis=1))


def _row_potential(nC, g, eps, log_a):
    """``nC`` is ``-C / eps``."""
    return eps * log_a - eps * _lse_rows(g[None, :] / eps + nC)


def _col_potential(nCt, f, eps, log_b):
    """``nCt`` is ``-C.T / eps`` (contiguous)."""
    return eps * log_b - eps * _lse_rows(f[None, :] / eps + nCt)


def _plan(C, f, g, eps) -> np.ndarray:
    return np.exp((f[:, None] + g[None, :] - C) / eps)


OMEGA_MAX = 1.95
_WINDOW = 20
_PATIENCE = 5


def _optimal_omega(rate: float, omega: float) -> float:
    """Relaxation parameter suggested by the rate observed at ``omega``.

    Uses the successive over-relaxation relation
    ``(rate + omega - 1)^2 = rate omega^2 mu^2`` to recover the squared
    plain-iteration rate ``mu^2``, then returns ``2 / (1 + sqrt(1 - mu^2))``.
    """
    mu2 = (rate + omega - 1.0) ** 2 / (rate * omega * omega)
    return min(OMEGA_MAX, 2.0 / (1.0 + math.sqrt(max(1.0 - mu2, 0.0))))


def _sinkhorn_stage(C, log_a, f, g, eps, max_iter, tol, overrelax=True, omega=1.0):
    """Alternate dual updates at fixed ``eps``.

    Returns (f, g, iterations, residual, omega).  After each ``g`` update the
    column marginals are exact, and the next ``f`` update reveals the row
    marginals, so the residual costs no extra pass.

    With ``overrelax`` the updates become ``f + omega (f_new - f)`` (and the
    same for ``g``).  ``omega`` is raised after every window of iterations that
    reduced the residual, using the observed contraction rate.  When
    ``_PATIENCE`` windows pass without a new best residual, ``omega - 1`` is
    halved and further increases are disabled.
    """
    a = np.exp(log_a)
    nC = C / -eps
    nCt = np.ascontiguousarray(nC.T)
    g = _col_potential(nCt, f, eps, log_a)
    res = math.inf
    omega = omega if overrelax else 1.0
    growing = overrelax
    mark = best = math.inf
    stale = 0
    it = 0
    while it < max_iter:
        f_new = _row_potential(nC, g, eps, log_a)
        res = float(np.max(np.abs(a * np.expm1((f - f_new) / eps))))
        it += 1
        if res <= tol:
            break
        if overrelax and it % _WINDOW == 0:
            if res < best:
                best, stale = res, 0
            else:
                stale += 1
                if stale >= _PATIENCE:
                    omega, growing, stale = 1.0 + 0.5 * (omega - 1.0), False, 0
            if growing and res < mark and math.isfinite(mark):
                omega = max(omega, _optimal_omega((res / mark) ** (1.0 / _WINDOW), omega))
            mark = res
        if omega == 1.0:
            f = f_new
            g = _col_potential(nCt, f, eps, log_a)
        else:
            f = f + omega * (f_new - f)
            g = g + omega * (_col_potential(nCt, f, eps, log_a) - g)
    if omega != 1.0:
        g = _col_potential(nCt, f, eps, log_a)
    return f, g, it, res, omega


def _marginal_residual(P, a) -> float:
    return float(max(np.max(np.abs(P.sum(axis=1) - a)), np.max(np.abs(P.sum(axis=0) - a))))


def _newton_polish(C, log_a, f, g, eps, tol, max_steps=50):
    """Damped Newton on the entropic dual, warm-started from Sinkhorn potentials.

    The potential ``f`` is updated by a Newton step (with ``g`` eliminated
    through the Schur complement and the additive gauge fixed by
    ``dg[-1] = 0``); ``g`` is then re-projected so columns stay exact.  Steps
    that do not lower the residual are halved and eventually rejected.
    """
    a = np.exp(log_a)
    M = len(a)
    nCt = np.ascontiguousarray(C.T / -eps)
    g = _col_potential(nCt, f, eps, log_a)
    P = _plan(C, f, g, eps)
    res = _marginal_residual(P, a)
    steps = 0
    while res > tol and steps < max_steps:
        steps += 1
        r, c = P.sum(axis=1), P.sum(axis=0)
        rf, rg = eps * (a - r), eps * (a - c)
        PtD = P.T / r[None, :]
        S = np.diag(c) - PtD @ P
        rhs = rg - PtD @ rf
        Sm = S[:-1, :-1]
        Sm[np.diag_indices(M - 1)] += 1e-14 * np.trace(Sm) / M
        dg = np.zeros(M)
        try:
            dg[:-1] = np.linalg.solve(Sm, rhs[:-1])
        except np.linalg.LinAlgError:
            break
        df = (rf - P @ dg) / r
        t = 1.0
        while t > 1e-6:
            fn = f + t * df
            gn = _col_potential(nCt, fn, eps, log_a)
            Pn = _plan(C, fn, gn, eps)
            rn = _marginal_residual(Pn, a)
            if np.isfinite(rn) and rn < res:
                break
            t *= 0.5
        else:
            break
        f, g, P, res = fn, gn, Pn, rn
    return f, g, steps, res


def sinkhorn_plan_cost(C, f, g, eps) -> float:
    return float(np.sum(_plan(C, f, g, eps) * C))


def _schedule(cfg: SinkhornConfig, scale: float) -> list[float]:
    eps_final = cfg.epsilon * scale
    if not cfg.anneal:
        return [eps_final]
    out = []
    e = cfg.epsilon_start * scale
    while e > eps_final:
        out.append(e)
        e *= cfg.factor
    return out + [eps_final]


def sinkhorn_w1(X, Y, cfg: SinkhornConfig | None = None) -> TransportResult:
    """Entropic W1 between uniform empirical measures on the rows of X and Y.

    Every stage stops at a loose residual of ``1e-3 / M``; at the final
    ``epsilon`` a Newton polish then drives the exact plan residual below
    ``tol``, with plain iterations as the fallback (and as the whole of the
    last stage when ``newton`` is off).
    """
    cfg = cfg or SinkhornConfig()
    X, Y = _as_cloud(X), _as_cloud(Y)
    M = len(X)
    if M < 1 or len(Y) != M:
        raise ShapeError(f"need equal non-empty sample counts, got {len(X)} and {len(Y)}")
    if X.shape == Y.shape and np.ascontiguousarray(Y).tobytes() < np.ascontiguousarray(X).tobytes():
        # solve in a canonical orientation; the transposed problem has the same cost
        X, Y = Y, X
    C = cost_matrix(X, Y)
    scale = float(np.median(C)) if cfg.relative else 1.0
    if scale <= 0.0:
        scale = float(np.mean(C)) or 1.0
    schedule = _schedule(cfg, scale)
    log_a = np.full(M, -math.log(M))
    f = np.zeros(M)
    total = 0
    res = math.inf
    g = np.zeros(M)
    loose = max(cfg.tol, 1e-3 / M)
    omega = 1.0
    for k, eps in enumerate(schedule):
        stage_tol = cfg.tol if (k == len(schedule) - 1 and not cfg.newton) else loose
        f, g, it, res, omega = _sinkhorn_stage(C, log_a, f, g, eps, cfg.max_iter, stage_tol,
                                               cfg.overrelax, omega)
        total += it
    eps = schedule[-1]
    res = _marginal_residual(_plan(C, f, g, eps), np.exp(log_a))
    if res > cfg.tol and cfg.newton:
        f, g, it, res = _newton_polish(C, log_a, f, g, eps, cfg.tol)
        total += it
    if res > cfg.tol:
        f, g, it, _, _ = _sinkhorn_stage(C, log_a, f, g, eps, cfg.max_iter, cfg.tol, overrelax=False)
        total += it
        res = _marginal_residual(_plan(C, f, g, eps), np.exp(log_a))
    if res > cfg.tol:
        raise SinkhornConvergenceError(res, total, eps)
    w1 = sinkhorn_plan_cost(C, f, g, eps)
    return TransportResult(max(w1, 0.0), total, res, eps, M)


def exact_w1_1d(x, y) -> float:
    x = np.sort(np.asarray(x, dtype=np.float64).ravel())
    y = np.sort(np.asarray(y, dtype=np.float64).ravel())
    if x.shape != y.shape:
        raise ShapeError(f"samples of different lengths: {x.size} and {y.size}")
    return float(np.mean(np.abs(x - y))) if x.size else 0.0


def exact_w1_assignment(X, Y) -> float:
    """Optimal matching cost divided by M; exact for uniform equal-size clouds."""
    X, Y = _as_cloud(X), _as_cloud(Y)
    M = len(X)
    if M > ASSIGNMENT_LIMIT:
        raise ValueError(f"assignment oracle limited to {ASSIGNMENT_LIMIT} points, got {M}")
    if len(Y) != M:
        raise ShapeError(f"need equal sample counts, got {M} and {len(Y)}")
    if M == 0:
        return 0.0
    C = cost_matrix(X, Y)
    r, c = linear_sum_assignment(C)
    return float(C[r, c].sum() / M)


def estimated_w1(model_samples, test_samples, cfg: SinkhornConfig | None = None) -> dict:
    """Sinkhorn W1 between generated and held-out samples, with run metadata."""
    cfg = cfg or SinkhornConfig()
    res = sinkhorn_w1(model_samples, test_samples, cfg)
    out = res.to_json()
    out["config"] = asdict(cfg)
    return out
