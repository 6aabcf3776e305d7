"""Constructive generators: quantile transport, products, chart mixtures."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

# rational approximation of the standard normal quantile (P. J. Acklam)
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00, 3.754408661907416e00)
_P_LOW = 0.02425


def _acklam(p: float) -> float:
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        return ((((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5])
                / ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0))
    if p > 1.0 - _P_LOW:
        return -_acklam(1.0 - p)
    q = p - 0.5
    r = q * q
    return ((((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q
            / (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0))


def normal_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def normal_quantile(p: float) -> float:
    """Inverse standard normal CDF: rational start plus one Halley step."""
    if not 0.0 < p < 1.0:
        if p == 0.0:
            return -math.inf
        if p == 1.0:
            return math.inf
        raise ValueError(f"probability must lie in [0, 1], got {p}")
    if p > 0.5:
        # 1 - p is exact here, and the refinement is accurate only in the lower half
        return -normal_quantile(1.0 - p)
    x = _acklam(p)
    e = normal_cdf(x) - p
    u = e * math.sqrt(2.0 * math.pi) * math.exp(0.5 * x * x)
    return x - u / (1.0 + 0.5 * x * u)


@dataclass(frozen=True)
class QuantileTransport:
    """The map ``F_Y^{-1} o F_Z`` pushing the source law onto the target law."""

    source_cdf: Callable[[float], float]
    target_quantile: Callable[[float], float]
    support: tuple[float, float] = (-math.inf, math.inf)
    name: str = ""

    def __call__(self, z):
        if np.ndim(z) == 0:
            return quantile_transport_eval(self, float(z))
        return np.array([quantile_transport_eval(self, float(v)) for v in np.ravel(z)]).reshape(np.shape(z))


def quantile_transport_eval(t: QuantileTransport, z: float) -> float:
    lo, hi = t.support
    if not lo <= z <= hi:
        raise ValueError(f"{z} lies outside the source support [{lo}, {hi}]")
    return t.target_quantile(t.source_cdf(z))


def _clip01(u: float) -> float:
    return min(max(u, 0.0), 1.0)


def uniform_cdf(z: float) -> float:
    return _clip01(z)


def exponential_quantile(u: float, rate: float = 1.0) -> float:
    return -math.log1p(-u) / rate


def uniform_to_uniform() -> QuantileTransport:
    return QuantileTransport(uniform_cdf, lambda u: u, (0.0, 1.0), "uniform->uniform")


def uniform_to_exponential(rate: float = 1.0) -> QuantileTransport:
    return QuantileTransport(uniform_cdf, lambda u: exponential_quantile(u, rate), (0.0, 1.0),
                             f"uniform->exponential({rate})")


def uniform_to_normal(mean: float = 0.0, scale: float = 1.0) -> QuantileTransport:
    return QuantileTransport(uniform_cdf, lambda u: mean + scale * normal_quantile(u), (0.0, 1.0),
                             f"uniform->normal({mean}, {scale})")


def normal_to_exponential(rate: float = 1.0) -> QuantileTransport:
    return QuantileTransport(normal_cdf, lambda u: exponential_quantile(u, rate), name="normal->exponential")


def product_generator(transports: Sequence[QuantileTransport]) -> Callable[[np.ndarray], np.ndarray]:
    """Coordinatewise map ``z -> (f_1(z_1), ..., f_D(z_D))`` on vectors or row batches."""
    transports = list(transports)
    if not transports:
        raise ValueError("need at least one coordinate map")

    def f(z):
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-1] != len(transports):
            raise ValueError(f"input of shape {z.shape} for {len(transports)} coordinate maps")
        return np.stack([t(z[..., j]) for j, t in enumerate(transports)], axis=-1)

    return f


@dataclass
class ChartMixture:
    """``f(z) = sum_j 1{z_1 in I_j} f_j(z_2, ...)`` with consecutive intervals of length ``pi_j``.

    ``I_1 = (0, pi_1)`` and ``I_j = [c_{j-1}, c_j)`` for the cumulative sums ``c``.
    """

    weights: np.ndarray
    components: list[Callable[[np.ndarray], np.ndarray]]

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if len(self.weights) != len(self.components) or not len(self.components):
            raise ValueError("need one weight per component")
        if np.any(self.weights <= 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must be positive and sum to 1, got {self.weights}")
        self.edges = np.concatenate([[0.0], np.cumsum(self.weights)])
        self.edges[-1] = 1.0

    def intervals(self) -> list[tuple[float, float]]:
        return list(zip(self.edges[:-1], self.edges[1:]))

    def component_index(self, z1: float) -> int:
        if not 0.0 < z1 < 1.0:
            raise ValueError(f"first latent coordinate must lie in (0, 1), got {z1}")
        j = int(np.searchsorted(self.edges, z1, side="right")) - 1
        return min(j, len(self.components) - 1)

    def local_coordinate(self, z1: float) -> float:
        """Position of ``z1`` inside its interval, rescaled to [0, 1)."""
        j = self.component_index(z1)
        return (z1 - self.edges[j]) / self.weights[j]


def chart_mixture_eval(m: ChartMixture, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    j = m.component_index(float(z[0]))
    return np.asarray(m.components[j](z[1:]), dtype=np.float64)


def case3_chart_mixture() -> ChartMixture:
    """Two shifted circle arcs; the arc parameter is the local coordinate."""

    def arc(lo: float, dx: float, dy: float):
        def f(u):
            a = 2.0 * math.pi * (lo + 0.5 * float(u[0]))
            return np.array([2.0 * math.cos(a) + dx, 2.0 * math.sin(a) + dy])
        return f

    return ChartMixture(np.array([0.5, 0.5]), [arc(0.0, -1.0, -0.4), arc(0.5, 1.0, 0.4)])


def ks_statistic(a, b) -> float:
    """Two-sample Kolmogorov-Smirnov statistic."""
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    grid = np.concatenate([a, b])
    fa = np.searchsorted(a, grid, side="right") / a.size
    fb = np.searchsorted(b, grid, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))


def ks_critical(n: int, m: int, alpha: float = 1e-3) -> float:
    """Asymptotic two-sample critical value ``c(alpha) sqrt((n + m) / (n m))``."""
    c = math.sqrt(-0.5 * math.log(alpha / 2.0))
    return c * math.sqrt((n + m) / (n * m))
