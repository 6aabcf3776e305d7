"""Deep generative model ``X = f(Z) + N(0, sigma^2 I)`` fitted by IWAE.

The sieve MLE is approximated by maximising the K-sample importance weighted
bound with Adam, after optionally perturbing the training data with
artificial Gaussian noise.  The checkpoint kept is the one with the best
validation bound.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .networks import (
    MLP,
    MLPSpec,
    PruneMask,
    apply_mask,
    forward,
    forward_var,
    init_mlp,
    prune_round,
    unflatten,
)
from .numerics import AdamState, NonFiniteError, ShapeError, Tape, adam_step, logsumexp

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
LOGVAR_BOUND = 10.0


class TrainingError(NonFiniteError):
    def __init__(self, epoch: int, batch: int, detail: str):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}: {detail}")
        self.epoch = epoch
        self.batch = batch


# ---------------------------------------------------------------------------
# model pieces


@dataclass(frozen=True)
class LatentSampler:
    kind: str = "standard_normal"
    dim: int = 1

    def __post_init__(self):
        if self.kind not in ("standard_normal", "uniform_unit_cube"):
            raise ValueError(f"unknown latent distribution {self.kind!r}")
        if self.dim < 1:
            raise ValueError(f"latent dimension must be >= 1, got {self.dim}")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "standard_normal":
            return rng.standard_normal((n, self.dim))
        return rng.random((n, self.dim))

    def log_prob(self, z) -> np.ndarray | float:
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-1] != self.dim:
            raise ShapeError(f"latent of shape {z.shape} for a {self.dim}-dimensional prior")
        if self.kind == "standard_normal":
            out = -0.5 * self.dim * LOG_2PI - 0.5 * np.sum(z * z, axis=-1)
        else:
            inside = np.all((z > 0.0) & (z < 1.0), axis=-1)
            out = np.where(inside, 0.0, -np.inf)
        return float(out) if np.ndim(out) == 0 else out


@dataclass
class GeneratorModel:
    generator: MLP
    log_sigma: float = 0.0
    sigma_bounds: tuple[float, float] = (1e-4, 2.0)

    def __post_init__(self):
        lo, hi = self.sigma_bounds
        if not 0.0 < lo <= hi:
            raise ValueError(f"sigma bounds must satisfy 0 < min <= max, got {self.sigma_bounds}")
        self.clamp()

    @property
    def sigma(self) -> float:
        return math.exp(self.log_sigma)

    @property
    def output_dim(self) -> int:
        return self.generator.spec.output_dim

    def clamp(self) -> None:
        lo, hi = self.sigma_bounds
        self.log_sigma = float(min(max(self.log_sigma, math.log(lo)), math.log(hi)))

    def __call__(self, z) -> np.ndarray:
        return forward(self.generator, z)

    def copy(self) -> "GeneratorModel":
        return GeneratorModel(self.generator.copy(), self.log_sigma, self.sigma_bounds)


@dataclass
class Encoder:
    mean_net: MLP
    logvar_net: MLP

    def mean_logvar(self, x) -> tuple[np.ndarray, np.ndarray]:
        mu = forward(self.mean_net, x)
        lv = np.clip(forward(self.logvar_net, x), -LOGVAR_BOUND, LOGVAR_BOUND)
        return mu, lv

    def copy(self) -> "Encoder":
        return Encoder(self.mean_net.copy(), self.logvar_net.copy())

    def to_dict(self) -> dict:
        return {"mean_net": self.mean_net.to_dict(), "logvar_net": self.logvar_net.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "Encoder":
        return cls(MLP.from_dict(d["mean_net"]), MLP.from_dict(d["logvar_net"]))


def log_gaussian(x, mean, sigma) -> float:
    """Log density of N(mean, sigma^2 I) at x; ``sigma`` may be per-coordinate."""
    x = np.asarray(x, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if x.shape != mean.shape:
        raise ShapeError(f"x of shape {x.shape} vs mean of shape {mean.shape}")
    if np.any(sigma <= 0):
        raise ValueError(f"sigma must be positive, got {sigma}")
    s = np.broadcast_to(sigma, x.shape)
    r = (x - mean) / s
    return float(-0.5 * x.size * LOG_2PI - np.sum(np.log(s)) - 0.5 * np.dot(r.ravel(), r.ravel()))


def joint_log_density(model: GeneratorModel, sampler: LatentSampler, x, z) -> float:
    """log p_Z(z) + log N(x; f(z), sigma^2 I)."""
    z = np.asarray(z, dtype=np.float64)
    return sampler.log_prob(z) + log_gaussian(x, model(z), model.sigma)


def encoder_sample(enc: Encoder, x, u) -> tuple[np.ndarray, float]:
    u = np.asarray(u, dtype=np.float64)
    mu, lv = enc.mean_logvar(x)
    if u.shape != mu.shape:
        raise ShapeError(f"noise of shape {u.shape} for latent of shape {mu.shape}")
    std = np.exp(0.5 * lv)
    z = mu + std * u
    return z, log_gaussian(z, mu, std)


def iwae_log_weights(model: GeneratorModel, enc: Encoder, sampler: LatentSampler, x, u) -> np.ndarray:
    """log p(x, z_k) - log q(z_k | x) for each row ``u_k`` of ``u``."""
    out = np.empty(len(u))
    for k, uk in enumerate(u):
        z, lq = encoder_sample(enc, x, uk)
        out[k] = joint_log_density(model, sampler, x, z) - lq
    return out


def iwae_objective(model: GeneratorModel, enc: Encoder, x, K: int, rng: np.random.Generator,
                   sampler: LatentSampler | None = None, u=None) -> float:
    """K-sample importance weighted lower bound of log p(x).

    ``u`` optionally supplies the K standard-normal draws explicitly.
    """
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    d = enc.mean_net.spec.output_dim
    sampler = sampler or LatentSampler("standard_normal", d)
    if u is None:
        u = rng.standard_normal((K, d))
    lw = iwae_log_weights(model, enc, sampler, x, u)
    _check_log_weights(lw)
    return logsumexp(lw) - math.log(len(lw))


def _check_log_weights(lw: np.ndarray) -> None:
    bad = np.flatnonzero(np.isnan(lw) | (lw == np.inf))
    if bad.size:
        raise NonFiniteError(f"non-finite importance weight at k={int(bad[0])}: {lw[bad[0]]}")
    if np.all(lw == -np.inf):
        raise NonFiniteError("all importance weights are zero")


# ---------------------------------------------------------------------------
# perturbation


@dataclass(frozen=True)
class PerturbationSpec:
    sigma_tilde: float = 0.0

    def __post_init__(self):
        if not self.sigma_tilde >= 0.0:
            raise ValueError(f"sigma_tilde must be >= 0, got {self.sigma_tilde}")

    def total_sigma(self, sigma_star: float) -> float:
        return math.hypot(sigma_star, self.sigma_tilde)


@dataclass(frozen=True)
class PerturbationSchedule:
    """Noise variance ``n ** (-beta_star / (beta_star + t_star))``."""

    beta_star: float
    t_star: float

    def __post_init__(self):
        if not (self.beta_star > 0.0 and self.t_star >= 1.0):
            raise ValueError(f"need beta_star > 0 and t_star >= 1, got {self.beta_star}, {self.t_star}")


def recommended_variance(schedule: PerturbationSchedule, n: int) -> float:
    if n < 1:
        raise ValueError(f"sample size must be >= 1, got {n}")
    return float(n) ** (-schedule.beta_star / (schedule.beta_star + schedule.t_star))


def perturb_dataset(data, spec: PerturbationSpec, rng: np.random.Generator) -> np.ndarray:
    data = np.asarray(data, dtype=np.float64)
    if spec.sigma_tilde < 0:
        raise ValueError(f"sigma_tilde must be >= 0, got {spec.sigma_tilde}")
    if spec.sigma_tilde == 0.0:
        return data.copy()
    return data + spec.sigma_tilde * rng.standard_normal(data.shape)


def sigma_recovery_error(sigma_hat: float, sigma_star: float, sigma_tilde: float) -> float:
    total = math.hypot(sigma_star, sigma_tilde)
    if total == 0.0:
        raise ZeroDivisionError("sigma_star and sigma_tilde are both zero")
    return abs(sigma_hat - total) / total


def sample_generator(model, sampler: LatentSampler, m: int, rng: np.random.Generator) -> np.ndarray:
    """Draws from the pushforward of the prior; no decoder noise.

    ``model`` is any batch-callable generator exposing ``output_dim``.
    """
    if m < 0:
        raise ValueError(f"sample count must be >= 0, got {m}")
    if m == 0:
        return np.empty((0, model.output_dim))
    return np.asarray(model(sampler.sample(rng, m)), dtype=np.float64)


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class TrainConfig:
    latent_dim: int = 10
    widths: tuple[int, ...] = (200, 200)
    encoder_widths: tuple[int, ...] | None = None
    activation: str = "leaky_relu"
    K: int = 10
    batch: int = 100
    lr: float = 1e-3
    max_epochs: int = 100
    seed: int = 0
    sigma_min: float = 1e-4
    sigma_max: float = 2.0
    sigma_init: float = 1.0
    sigma_tilde: float = 0.0
    schedule: PerturbationSchedule | None = None
    prior: str = "standard_normal"
    time_budget: float = 600.0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.encoder_widths is not None:
            object.__setattr__(self, "encoder_widths", tuple(int(w) for w in self.encoder_widths))
        if isinstance(self.schedule, dict):
            object.__setattr__(self, "schedule", PerturbationSchedule(**self.schedule))
        if self.K < 1 or self.batch < 1:
            raise ValueError(f"K and batch must be >= 1, got K={self.K}, batch={self.batch}")
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.max_epochs < 0:
            raise ValueError(f"max_epochs must be >= 0, got {self.max_epochs}")
        if not 0 < self.sigma_min <= self.sigma_max:
            raise ValueError(f"need 0 < sigma_min <= sigma_max, got {self.sigma_min}, {self.sigma_max}")
        PerturbationSpec(self.sigma_tilde)

    def perturbation(self, n: int) -> PerturbationSpec:
        if self.schedule is not None:
            return PerturbationSpec(math.sqrt(recommended_variance(self.schedule, n)))
        return PerturbationSpec(self.sigma_tilde)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        if self.encoder_widths is not None:
            d["encoder_widths"] = list(self.encoder_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown training config fields: {sorted(extra)}")
        return cls(**d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def _streams(seed: int, run_index: int = 0) -> dict[str, np.random.Generator]:
    names = ("generator", "enc_mean", "enc_logvar", "perturb", "perturb_val", "shuffle", "draw", "val")
    children = np.random.SeedSequence([seed, run_index]).spawn(len(names))
    return {k: np.random.default_rng(s) for k, s in zip(names, children)}


def init_models(config: TrainConfig, data_dim: int, seed: int | None = None) -> tuple[GeneratorModel, Encoder]:
    s = _streams(config.seed if seed is None else seed)
    d = config.latent_dim
    enc_w = config.encoder_widths or config.widths
    gen = init_mlp(MLPSpec((d, *config.widths, data_dim), config.activation), s["generator"])
    mean = init_mlp(MLPSpec((data_dim, *enc_w, d), config.activation), s["enc_mean"])
    lvar = init_mlp(MLPSpec((data_dim, *enc_w, d), config.activation), s["enc_logvar"])
    sigma0 = min(max(config.sigma_init, config.sigma_min), config.sigma_max)
    model = GeneratorModel(gen, math.log(sigma0), (config.sigma_min, config.sigma_max))
    return model, Encoder(mean, lvar)


# ---------------------------------------------------------------------------
# batched objective on the tape


class _Layout:
    """Flat parameter vector = generator | log_sigma | encoder mean | encoder logvar."""

    def __init__(self, model: GeneratorModel, enc: Encoder):
        self.specs = (model.generator.spec, enc.mean_net.spec, enc.logvar_net.spec)
        self.sizes = [s.n_params() for s in self.specs]
        self.n_gen = self.sizes[0]
        self.sigma_bounds = model.sigma_bounds

    def pack(self, model: GeneratorModel, enc: Encoder) -> np.ndarray:
        return np.concatenate([model.generator.flat(), [model.log_sigma],
                               enc.mean_net.flat(), enc.logvar_net.flat()])

    def unpack(self, theta: np.ndarray) -> tuple[GeneratorModel, Encoder]:
        g, m, lv = self.sizes
        gen = MLP.from_flat(self.specs[0], theta[:g].copy())
        mean = MLP.from_flat(self.specs[1], theta[g + 1:g + 1 + m].copy())
        lvar = MLP.from_flat(self.specs[2], theta[g + 1 + m:].copy())
        return GeneratorModel(gen, float(theta[g]), self.sigma_bounds), Encoder(mean, lvar)

    def leaves(self, tape: Tape, theta: np.ndarray):
        g, m, lv = self.sizes
        gen = [tape.leaf(a) for a in unflatten(self.specs[0], theta[:g])]
        log_sigma = tape.leaf(theta[g])
        mean = [tape.leaf(a) for a in unflatten(self.specs[1], theta[g + 1:g + 1 + m])]
        lvar = [tape.leaf(a) for a in unflatten(self.specs[2], theta[g + 1 + m:])]
        return gen, log_sigma, mean, lvar

    def log_sigma_index(self) -> int:
        return self.n_gen


def batch_log_weights(tape: Tape, layout: _Layout, params, prior: str, X: np.ndarray, U: np.ndarray):
    """Tape node of shape (B, K) holding the IWAE log-weights."""
    gen, log_sigma, mean, lvar = params
    gspec, mspec, lspec = layout.specs
    B, K, d = U.shape
    D = X.shape[1]
    mu = forward_var(mspec, mean, X)
    lv = forward_var(lspec, lvar, X).clip(-LOGVAR_BOUND, LOGVAR_BOUND)
    std = (lv * 0.5).exp()
    Z = mu.reshape(B, 1, d) + std.reshape(B, 1, d) * U
    log_q = lv.sum(axis=1).reshape(B, 1) * -0.5 + (-0.5 * d * LOG_2PI - 0.5 * np.sum(U * U, axis=2))
    F = forward_var(gspec, gen, Z.reshape(B * K, d)).reshape(B, K, D)
    sq = (X[:, None, :] - F).square().sum(axis=2)
    log_px = sq * (-0.5) * (log_sigma * -2.0).exp() - log_sigma * D - 0.5 * D * LOG_2PI
    if prior == "standard_normal":
        log_pz = Z.square().sum(axis=2) * -0.5 - 0.5 * d * LOG_2PI
        return log_pz + log_px - log_q
    inside = np.all((Z.value > 0.0) & (Z.value < 1.0), axis=2)
    return log_px - log_q + np.where(inside, 0.0, -np.inf)


def batch_objective(tape, layout, params, prior, X, U):
    lw = batch_log_weights(tape, layout, params, prior, X, U)
    return lw.logsumexp(axis=1) - math.log(U.shape[1]), lw


def evaluate_iwae(model: GeneratorModel, enc: Encoder, X: np.ndarray, U: np.ndarray,
                  prior: str = "standard_normal", chunk: int = 500) -> np.ndarray:
    """Per-row IWAE bound for fixed draws ``U`` of shape (n, K, d)."""
    layout = _Layout(model, enc)
    theta = layout.pack(model, enc)
    out = np.empty(len(X))
    for s in range(0, len(X), chunk):
        tape = Tape()
        obj, _ = batch_objective(tape, layout, layout.leaves(tape, theta), prior, X[s:s + chunk], U[s:s + chunk])
        out[s:s + chunk] = obj.value
    return out


def minibatch_loss_and_grad(model: GeneratorModel, enc: Encoder, X: np.ndarray, U: np.ndarray,
                            prior: str = "standard_normal"):
    """Negative mean IWAE bound of a minibatch and its gradient in flat layout order."""
    layout = _Layout(model, enc)
    theta = layout.pack(model, enc)
    return _loss_grad(layout, theta, X, U, prior)


def _loss_grad(layout: _Layout, theta: np.ndarray, X, U, prior):
    tape = Tape()
    params = layout.leaves(tape, theta)
    obj, lw = batch_objective(tape, layout, params, prior, X, U)
    loss = -obj.mean()
    grads = tape.backward(loss)
    g = np.concatenate([np.reshape(a, -1) for a in grads])
    return float(loss.value), g, lw.value


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: GeneratorModel
    encoder: Encoder
    history: list[dict] = field(default_factory=list)
    selected_epoch: int = 0
    sigma_tilde: float = 0.0
    stopped_early: bool = False

    def __iter__(self):
        return iter((self.model, self.encoder, self.history))


def train(config: TrainConfig, train_data, val_data, *, init: tuple[GeneratorModel, Encoder] | None = None,
          mask: PruneMask | None = None, max_epochs: int | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Adam on the negative IWAE bound; returns the best-validation checkpoint.

    The training data is perturbed once with the configured noise level.  The
    validation data receives independent noise of the same level so both
    losses refer to the same perturbed distribution.  ``mask`` freezes the
    zeroed generator parameters.
    """
    train_data = np.asarray(train_data, dtype=np.float64)
    val_data = np.asarray(val_data, dtype=np.float64)
    if train_data.ndim != 2 or len(train_data) == 0 or len(val_data) == 0:
        raise ValueError("training and validation data must be non-empty 2-D arrays")
    if val_data.shape[1] != train_data.shape[1]:
        raise ShapeError(f"train has {train_data.shape[1]} columns, validation {val_data.shape[1]}")
    epochs = config.max_epochs if max_epochs is None else max_epochs
    streams = _streams(config.seed)
    pert = config.perturbation(len(train_data))
    X = perturb_dataset(train_data, pert, streams["perturb"])
    Xv = perturb_dataset(val_data, pert, streams["perturb_val"])

    model, enc = init if init is not None else init_models(config, train_data.shape[1])
    model, enc = model.copy(), enc.copy()
    layout = _Layout(model, enc)
    theta = layout.pack(model, enc)
    if mask is not None:
        if mask.keep.size != layout.n_gen:
            raise ShapeError(f"mask of size {mask.keep.size} for {layout.n_gen} generator parameters")
        theta[:layout.n_gen] = mask.apply(theta[:layout.n_gen])
    result = TrainResult(*layout.unpack(theta), sigma_tilde=pert.sigma_tilde)
    if epochs == 0:
        return result

    d, K, n = config.latent_dim, config.K, len(X)
    Uv = streams["val"].standard_normal((len(Xv), K, d))
    state = AdamState.zeros(theta.size, lr=config.lr)
    lo, hi = math.log(config.sigma_min), math.log(config.sigma_max)
    js = layout.log_sigma_index()
    best = (-np.inf, None, 0)
    t0 = time.perf_counter()
    for epoch in range(1, epochs + 1):
        perm = streams["shuffle"].permutation(n)
        total = 0.0
        for b, s in enumerate(range(0, n, config.batch)):
            idx = perm[s:s + config.batch]
            U = streams["draw"].standard_normal((len(idx), K, d))
            loss, g, lw = _loss_grad(layout, theta, X[idx], U, config.prior)
            if not (math.isfinite(loss) and np.all(np.isfinite(g))):
                raise TrainingError(epoch, b, f"loss={loss}")
            if mask is not None:
                g[:layout.n_gen] = apply_mask(g[:layout.n_gen], mask)
            theta, state = adam_step(state, theta, g)
            theta[js] = min(max(theta[js], lo), hi)
            total += loss * len(idx)
        model_e, enc_e = layout.unpack(theta)
        val = float(np.mean(evaluate_iwae(model_e, enc_e, Xv, Uv, config.prior)))
        if not math.isfinite(val):
            raise TrainingError(epoch, -1, f"validation bound {val}")
        row = {"epoch": epoch, "train_iwae": -total / n, "val_iwae": val, "sigma_hat": model_e.sigma}
        result.history.append(row)
        if on_epoch is not None:
            on_epoch(row)
        log.debug("epoch %d train %.5f val %.5f sigma %.5f", epoch, row["train_iwae"], val, model_e.sigma)
        if val > best[0]:
            best = (val, theta.copy(), epoch)
        if time.perf_counter() - t0 > config.time_budget:
            log.warning("time budget of %.0fs exhausted after epoch %d", config.time_budget, epoch)
            result.stopped_early = True
            break
    result.model, result.encoder = layout.unpack(best[1])
    result.selected_epoch = best[2]
    return result


def prune_train(config: TrainConfig, train_data, val_data, fractions=(0.25, 0.5),
                retrain_epochs: int | None = None) -> tuple[TrainResult, PruneMask, list[TrainResult]]:
    """Dense fit, then alternate magnitude pruning of the generator and masked retraining."""
    stages = [train(config, train_data, val_data)]
    mask = PruneMask.full(stages[0].model.generator.spec.n_params())
    for frac in fractions:
        prev = stages[-1]
        pruned, mask = prune_round(prev.model.generator, frac, mask)
        start = (replace(prev.model, generator=pruned), prev.encoder)
        stages.append(train(config, train_data, val_data, init=start, mask=mask,
                            max_epochs=retrain_epochs))
    return stages[-1], mask, stages


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_dict(model: GeneratorModel, seed: int, *, encoder: Encoder | None = None,
                    mask: PruneMask | None = None, latent: str = "standard_normal") -> dict:
    out = model.generator.to_dict()
    out.update(log_sigma=model.log_sigma, sigma_bounds=list(model.sigma_bounds), seed=int(seed), latent=latent)
    if mask is not None:
        out["mask"] = mask.to_list()
    if encoder is not None:
        out["encoder"] = encoder.to_dict()
    return out


def save_checkpoint(path, model: GeneratorModel, seed: int, **kw) -> None:
    Path(path).write_text(json.dumps(checkpoint_dict(model, seed, **kw)))


def load_checkpoint(path) -> dict:
    """Returns a dict with ``model``, ``sampler``, ``seed`` and optional ``encoder``/``mask``."""
    d = json.loads(Path(path).read_text())
    gen = MLP.from_dict(d)
    model = GeneratorModel(gen, float(d["log_sigma"]), tuple(d.get("sigma_bounds", (1e-4, 2.0))))
    out = {
        "model": model,
        "sampler": LatentSampler(d.get("latent", "standard_normal"), gen.spec.input_dim),
        "seed": d.get("seed"),
        "encoder": Encoder.from_dict(d["encoder"]) if "encoder" in d else None,
        "mask": PruneMask.from_list(d["mask"]) if "mask" in d else None,
    }
    return out
