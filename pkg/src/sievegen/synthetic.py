"""Ground-truth generators for the synthetic experiments.

Cases 1-3 map ``z ~ Uniform(0, 1)`` to curves in the plane, the Swiss roll maps
``Uniform(0, 1)^2`` into R^3, the sphere is sampled directly, and the two
five-output models push ``N(0, I_3)`` forward.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .numerics import ShapeError

CASES = ("case1", "case2", "case3", "swiss_roll", "sphere", "model1", "model2")
LATENT_DIM = {"case1": 1, "case2": 1, "case3": 1, "swiss_roll": 2, "sphere": 3, "model1": 3, "model2": 3}
AMBIENT_DIM = {"case1": 2, "case2": 2, "case3": 2, "swiss_roll": 3, "sphere": 3, "model1": 5, "model2": 5}
TWO_PI = 2.0 * math.pi


def _case1(z):
    z = z[:, 0]
    return np.stack([6.0 * (z - 0.5), 0.5 * (z - 2.0) * z * (z + 2.0)], axis=1)


def _case2(z):
    a = TWO_PI * z[:, 0]
    return np.stack([2.0 * np.cos(a), 2.0 * np.sin(a)], axis=1)


def _case3(z):
    # z == 0.5 falls on the "otherwise" branch
    upper = z[:, 0] > 0.5
    a = TWO_PI * z[:, 0]
    dx = np.where(upper, 1.0, -1.0)
    dy = np.where(upper, 0.4, -0.4)
    return np.stack([2.0 * np.cos(a) + dx, 2.0 * np.sin(a) + dy], axis=1)


def _swiss_roll(z):
    t1 = 1.5 * math.pi * (1.0 + 2.0 * z[:, 0])
    t2 = 21.0 * z[:, 1]
    return np.stack([t1 * np.cos(t1), t2, t1 * np.sin(t1)], axis=1)


def _sphere(z):
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def _model1(z):
    z1, z2, z3 = z.T
    return np.stack([
        -2.3 + 1.0 / (0.7 + np.exp(0.3 - 2.0 * z1)) + 0.3 * z2**2,
        0.9 + 0.8 * z1 - 0.1 * z1**3 + np.log(z2**2 + 1.5) - 0.4 * z3**2,
        1.8 + 3.5 / (2.0 * z2**2 + z2 + 4.0) - 0.2 * np.exp(z3),
        1.2 * z1 - 0.1 * z2**3 + 0.05 * z3**4,
        3.0 + 0.5 * np.log(2.5 + np.exp(z1)) - 0.2 * np.exp(z3 + 0.2),
    ], axis=1)


def _model2(z):
    z1, z2, z3 = z.T
    return np.stack([
        5.0 * z3 / (3.7 + np.exp(-2.0 * z1 + 0.4 * z2)),
        0.9 - 0.1 * z1 - 0.2 * z1 * (z2 - 0.1) ** 2 + 0.15 * z1 * z3,
        np.log(2.0 + (z1 - z2) ** 2) - 0.2 * z1 * np.exp(0.2 * z3),
        1.5 - 0.3 * z1**2 + 0.07 * z1 * z2 * z3,
        (3.0 * z1 - 1.2) / (z2**2 + 2.0 * z2 + 3.3) + 0.5 * np.log(1.0 + (z1 - 0.1) ** 2 + z2**2 * z3**2),
    ], axis=1)


_GENERATORS = {
    "case1": _case1, "case2": _case2, "case3": _case3, "swiss_roll": _swiss_roll,
    "sphere": _sphere, "model1": _model1, "model2": _model2,
}


def true_generator(case: str, z) -> np.ndarray:
    """Evaluate the true generator on one latent vector or a batch of rows.

    For the sphere the "latent" is a 3-D Gaussian vector that is normalised.
    """
    if case not in _GENERATORS:
        raise ValueError(f"unknown case {case!r}; expected one of {CASES}")
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim <= 1
    zz = np.atleast_1d(z)[None, :] if single else z
    if zz.ndim != 2 or zz.shape[1] != LATENT_DIM[case]:
        raise ShapeError(f"{case} needs latent dimension {LATENT_DIM[case]}, got shape {z.shape}")
    out = _GENERATORS[case](zz)
    return out[0] if single else out


def draw_latent(case: str, rng: np.random.Generator, n: int) -> np.ndarray:
    if case in ("model1", "model2", "sphere"):
        return rng.standard_normal((n, LATENT_DIM[case]))
    return rng.random((n, LATENT_DIM[case]))


@dataclass(frozen=True)
class SyntheticSpec:
    case: str = "case1"
    n_train: int = 1000
    n_val: int = 1000
    n_test: int = 1000
    sigma_star: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.case not in CASES:
            raise ValueError(f"unknown case {self.case!r}; expected one of {CASES}")
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ValueError("sample counts must be >= 0")
        if not self.sigma_star >= 0:
            raise ValueError(f"sigma_star must be >= 0, got {self.sigma_star}")

    @property
    def ambient_dim(self) -> int:
        return AMBIENT_DIM[self.case]

    @property
    def latent_dim(self) -> int:
        return LATENT_DIM[self.case]


def sample(spec: SyntheticSpec, rng: np.random.Generator | None = None) -> dict[str, np.ndarray]:
    """Draw ``n_train + n_val + n_test`` observations and split them in that order."""
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    n = spec.n_train + spec.n_val + spec.n_test
    x = true_generator(spec.case, draw_latent(spec.case, rng, n)) if n else np.empty((0, spec.ambient_dim))
    if spec.sigma_star > 0:
        x = x + spec.sigma_star * rng.standard_normal(x.shape)
    a, b = spec.n_train, spec.n_train + spec.n_val
    return {"train": x[:a], "val": x[a:b], "test": x[b:]}


def write_csv(path, data: np.ndarray) -> None:
    data = np.asarray(data, dtype=np.float64)
    header = ",".join(f"x{j + 1}" for j in range(data.shape[1]))
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for row in data:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_csv(path) -> np.ndarray:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        rows = [[float(v) for v in line.split(",")] for line in fh if line.strip()]
    return np.array(rows, dtype=np.float64).reshape(len(rows), len(header))


def write_dataset(out_dir, spec: SyntheticSpec, splits: dict[str, np.ndarray]) -> dict[str, Path]:
    """Write one CSV per split plus a JSON sidecar describing the draw."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, arr in splits.items():
        p = out / f"{spec.case}_{name}.csv"
        write_csv(p, arr)
        paths[name] = p
    sidecar = {"spec": asdict(spec), "seed": spec.seed, "files": {k: v.name for k, v in paths.items()}}
    (out / f"{spec.case}.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return paths
