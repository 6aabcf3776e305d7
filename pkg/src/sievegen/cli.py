"""Command-line driver for data generation, training, evaluation and sweeps.

Every subcommand accepts ``--config`` (a JSON file), ``--seed`` and ``--out``.
Exit status is 0 on success, 2 for configuration errors and 3 for numerical
failures.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import statistics
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import meta_gam, ot, sieve_mle, synthetic
from .numerics import NonFiniteError

log = logging.getLogger("sievegen")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
NUMERIC_ERRORS = (NonFiniteError, FloatingPointError, ot.SinkhornConvergenceError, np.linalg.LinAlgError)

SWEEP_FIELDS = ["seed", "n", "sigma_tilde", "sigma_hat", "sigma_error", "w1_estimate", "selected_epoch",
                "wall_seconds", "val_iwae", "val_w1", "config_hash", "status"]
KEY_FIELDS = ("seed", "n", "sigma_tilde", "config_hash")


class ConfigError(ValueError):
    pass


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:12]


@dataclass
class ExperimentConfig:
    """One sweep: a data recipe, a training recipe and the grids to run."""

    data: synthetic.SyntheticSpec = field(default_factory=synthetic.SyntheticSpec)
    train: sieve_mle.TrainConfig = field(default_factory=sieve_mle.TrainConfig)
    sigma_grid: list[float] = field(default_factory=lambda: [0.0])
    n_grid: list[int] = field(default_factory=list)
    seeds: list[int] = field(default_factory=lambda: [0])
    eval_m: int = 1000
    sinkhorn: ot.SinkhornConfig = field(default_factory=ot.SinkhornConfig)
    val_w1: bool = False
    workers: int = 1

    def __post_init__(self):
        if not self.sigma_grid:
            raise ConfigError("sigma_grid must be non-empty")
        if any(s < 0 for s in self.sigma_grid):
            raise ConfigError(f"sigma_grid entries must be >= 0, got {self.sigma_grid}")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"seeds must be non-empty and distinct, got {self.seeds}")
        if any(n < 1 for n in self.n_grid):
            raise ConfigError(f"n_grid entries must be >= 1, got {self.n_grid}")
        if self.eval_m < 1 or self.workers < 1:
            raise ConfigError("eval_m and workers must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown experiment config fields: {sorted(extra)}")
        kw = dict(d)
        try:
            if "data" in kw:
                kw["data"] = synthetic.SyntheticSpec(**kw["data"])
            if "train" in kw:
                kw["train"] = sieve_mle.TrainConfig.from_dict(kw["train"])
            if "sinkhorn" in kw:
                kw["sinkhorn"] = ot.SinkhornConfig(**kw["sinkhorn"])
        except TypeError as e:
            raise ConfigError(str(e)) from e
        for name in ("sigma_grid", "n_grid", "seeds"):
            if name in kw:
                kw[name] = list(kw[name])
        return cls(**kw)

    def to_dict(self) -> dict:
        return {
            "data": asdict(self.data), "train": self.train.to_dict(), "sigma_grid": list(self.sigma_grid),
            "n_grid": list(self.n_grid), "seeds": list(self.seeds), "eval_m": self.eval_m,
            "sinkhorn": asdict(self.sinkhorn), "val_w1": self.val_w1, "workers": self.workers,
        }

    def run_hash(self) -> str:
        """Hash of everything that fixes a run apart from (seed, n, sigma_tilde)."""
        d = self.to_dict()
        for k in ("sigma_grid", "n_grid", "seeds", "workers"):
            d.pop(k)
        d["data"].pop("n_train")
        d["train"].pop("seed")
        d["train"].pop("sigma_tilde")
        return _hash(d)


# ---------------------------------------------------------------------------
# single runs


def _data_for(cfg: ExperimentConfig, n: int) -> dict[str, np.ndarray]:
    spec = synthetic.SyntheticSpec(cfg.data.case, n, cfg.data.n_val, cfg.data.n_test,
                                   cfg.data.sigma_star, cfg.data.seed)
    return synthetic.sample(spec)


def _eval_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 0xE7A1]))


def evaluate_model(model, sampler, reference: np.ndarray, m: int, seed: int,
                   sinkhorn: ot.SinkhornConfig) -> dict:
    """Estimated W1 between ``m`` generator draws and the first ``m`` reference rows."""
    if len(reference) < m:
        raise ConfigError(f"need {m} reference rows for evaluation, have {len(reference)}")
    Q = sieve_mle.sample_generator(model, sampler, m, _eval_rng(seed))
    return ot.estimated_w1(Q, reference[:m], sinkhorn)


def run_one(cfg: ExperimentConfig, seed: int, n: int, sigma_tilde: float) -> dict:
    """Train one model and score it; failures become a row with ``status`` set."""
    t0 = time.perf_counter()
    row = {"seed": seed, "n": n, "sigma_tilde": sigma_tilde, "config_hash": cfg.run_hash(), "status": "ok"}
    for k in ("sigma_hat", "sigma_error", "w1_estimate", "val_iwae", "val_w1"):
        row[k] = math.nan
    row["selected_epoch"] = -1
    try:
        data = _data_for(cfg, n)
        tc = sieve_mle.TrainConfig.from_dict({**cfg.train.to_dict(), "seed": seed, "sigma_tilde": sigma_tilde})
        res = sieve_mle.train(tc, data["train"], data["val"])
        sampler = sieve_mle.LatentSampler(tc.prior, tc.latent_dim)
        row["sigma_hat"] = res.model.sigma
        if math.hypot(cfg.data.sigma_star, res.sigma_tilde) > 0.0:
            row["sigma_error"] = sieve_mle.sigma_recovery_error(res.model.sigma, cfg.data.sigma_star,
                                                                res.sigma_tilde)
        row["selected_epoch"] = res.selected_epoch
        if res.history:
            row["val_iwae"] = res.history[res.selected_epoch - 1]["val_iwae"]
        row["w1_estimate"] = evaluate_model(res.model, sampler, data["test"], cfg.eval_m, seed, cfg.sinkhorn)["w1"]
        if cfg.val_w1:
            row["val_w1"] = evaluate_model(res.model, sampler, data["val"], min(cfg.eval_m, len(data["val"])),
                                           seed + 1, cfg.sinkhorn)["w1"]
    except NUMERIC_ERRORS as e:
        row["status"] = f"failed: {type(e).__name__}: {e}"
        log.warning("run seed=%s n=%s sigma_tilde=%s failed: %s", seed, n, sigma_tilde, e)
    row["wall_seconds"] = time.perf_counter() - t0
    return row


# ---------------------------------------------------------------------------
# sweep CSVs


def read_rows(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def row_key(row: dict) -> tuple:
    return (int(row["seed"]), int(row["n"]), float(row["sigma_tilde"]), str(row["config_hash"]))


def append_row(path, row: dict, fieldnames=SWEEP_FIELDS) -> None:
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames, extrasaction="ignore")
        if new:
            w.writeheader()
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def run_sweep(cfg: ExperimentConfig, ns: list[int], out_csv) -> list[dict]:
    """Run every missing (seed, n, sigma_tilde) combination, appending one row each."""
    done = {row_key(r) for r in read_rows(out_csv)}
    h = cfg.run_hash()
    todo = [(s, n, st) for s in cfg.seeds for n in ns for st in cfg.sigma_grid
            if (s, n, float(st), h) not in done]
    log.info("%d runs to do, %d already recorded", len(todo), len(done))
    rows = []
    if cfg.workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            futures = [pool.submit(run_one, cfg, s, n, st) for s, n, st in todo]
            for fut in futures:
                row = fut.result()
                append_row(out_csv, row)
                rows.append(row)
    else:
        for s, n, st in todo:
            row = run_one(cfg, s, n, st)
            append_row(out_csv, row)
            rows.append(row)
    return rows


def summarize(rows: list[dict], metric: str = "w1_estimate") -> list[dict]:
    """Median and mean of ``metric`` (and sigma_error) per (n, sigma_tilde) over successful runs."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        if r.get("status", "ok") != "ok":
            continue
        groups.setdefault((int(r["n"]), float(r["sigma_tilde"])), []).append(r)
    out = []
    for (n, st), rs in sorted(groups.items()):
        vals = [float(r[metric]) for r in rs]
        errs = [e for e in (float(r["sigma_error"]) for r in rs) if not math.isnan(e)]
        out.append({"n": n, "sigma_tilde": st, "runs": len(rs),
                    f"median_{metric}": statistics.median(vals), f"mean_{metric}": statistics.fmean(vals),
                    "median_sigma_error": statistics.median(errs) if errs else math.nan,
                    "mean_sigma_error": statistics.fmean(errs) if errs else math.nan})
    return out


def select_sigma(rows: list[dict], criterion: str = "val_iwae") -> dict[int, float]:
    """Per n, the sigma_tilde preferred by the median validation criterion.

    ``val_iwae`` prefers the largest bound, ``val_w1`` the smallest distance.
    """
    if criterion not in ("val_iwae", "val_w1"):
        raise ConfigError(f"unknown selection criterion {criterion!r}")
    best: dict[int, tuple[float, float]] = {}
    for s in summarize(rows, criterion):
        score = s[f"median_{criterion}"]
        score = -score if criterion == "val_iwae" else score
        if math.isnan(score):
            continue
        if s["n"] not in best or score < best[s["n"]][0]:
            best[s["n"]] = (score, s["sigma_tilde"])
    return {n: st for n, (_, st) in best.items()}


# ---------------------------------------------------------------------------
# subcommands


def _load_json(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True))


def cmd_gen_data(args) -> int:
    d = _load_json(args.config)
    for flag, key in (("case", "case"), ("n", "n_train"), ("n_val", "n_val"), ("n_test", "n_test"),
                      ("sigma_star", "sigma_star")):
        if getattr(args, flag) is not None:
            d[key] = getattr(args, flag)
    if args.seed is not None:
        d["seed"] = args.seed
    try:
        spec = synthetic.SyntheticSpec(**d)
    except TypeError as e:
        raise ConfigError(str(e)) from e
    paths = synthetic.write_dataset(_out_dir(args), spec, synthetic.sample(spec))
    print(json.dumps({k: str(v) for k, v in paths.items()}))
    return EXIT_OK


def _train_inputs(args, d: dict):
    """Training and validation arrays from CSV paths or a ``data`` recipe in the config."""
    data_spec = d.pop("data", None)
    if args.data:
        train = synthetic.read_csv(args.data)
        if not args.val:
            raise ConfigError("--val is required together with --data")
        val = synthetic.read_csv(args.val)
        return train, val, None
    if data_spec is None:
        raise ConfigError("give --data/--val CSV files or a 'data' section in the config")
    try:
        spec = synthetic.SyntheticSpec(**data_spec)
    except TypeError as e:
        raise ConfigError(str(e)) from e
    splits = synthetic.sample(spec)
    return splits["train"], splits["val"], splits["test"]


def cmd_train(args, prune: bool = False) -> int:
    d = _load_json(args.config)
    prune = prune or bool(d.pop("prune", False)) or getattr(args, "prune", False)
    retrain = d.pop("retrain_epochs", None)
    train_x, val_x, _ = _train_inputs(args, d)
    if args.seed is not None:
        d["seed"] = args.seed
    if args.max_epochs is not None:
        d["max_epochs"] = args.max_epochs
    d.setdefault("latent_dim", train_x.shape[1])
    try:
        tc = sieve_mle.TrainConfig.from_dict(d)
    except TypeError as e:
        raise ConfigError(str(e)) from e
    out = _out_dir(args)
    h = tc.hash()
    if prune:
        final, mask, stages = sieve_mle.prune_train(tc, train_x, val_x, retrain_epochs=retrain)
    else:
        final, mask, stages = sieve_mle.train(tc, train_x, val_x), None, None
    sieve_mle.save_checkpoint(out / "checkpoint.json", final.model, tc.seed, encoder=final.encoder,
                              mask=mask, latent=tc.prior)
    fieldnames = ["stage", "epoch", "train_iwae", "val_iwae", "sigma_hat", "seed", "config_hash"]
    hist = out / "history.csv"
    hist.unlink(missing_ok=True)
    for k, stage in enumerate(stages or [final]):
        for row in stage.history:
            append_row(hist, {**row, "stage": k, "seed": tc.seed, "config_hash": h}, fieldnames)
    summary = {"seed": tc.seed, "config_hash": h, "sigma_hat": final.model.sigma,
               "selected_epoch": final.selected_epoch, "sigma_tilde": final.sigma_tilde,
               "zero_fraction": float(np.mean(final.model.generator.flat() == 0.0))}
    _write_json(out / "train_summary.json", summary)
    print(json.dumps(summary))
    return EXIT_OK


def _sinkhorn_from(d: dict) -> ot.SinkhornConfig:
    try:
        return ot.SinkhornConfig(**d.get("sinkhorn", {}))
    except TypeError as e:
        raise ConfigError(str(e)) from e


def cmd_eval_w1(args) -> int:
    d = _load_json(args.config)
    ck = sieve_mle.load_checkpoint(args.checkpoint)
    test = synthetic.read_csv(args.test)
    m = args.m or d.get("eval_m", min(1000, len(test)))
    seed = args.seed if args.seed is not None else (ck["seed"] or 0)
    res = evaluate_model(ck["model"], ck["sampler"], test, m, seed, _sinkhorn_from(d))
    res["seed"] = seed
    _write_json(_out_dir(args) / "w1.json", res)
    print(json.dumps({k: v for k, v in res.items() if k != "config"}))
    return EXIT_OK


def _experiment(args) -> ExperimentConfig:
    d = _load_json(args.config)
    if args.seed is not None:
        d["seeds"] = [args.seed]
    if getattr(args, "seeds", None):
        d["seeds"] = args.seeds
    if getattr(args, "sigma_grid", None):
        d["sigma_grid"] = args.sigma_grid
    if getattr(args, "n_grid", None):
        d["n_grid"] = args.n_grid
    if getattr(args, "workers", None):
        d["workers"] = args.workers
    if getattr(args, "max_epochs", None) is not None:
        d.setdefault("train", {})["max_epochs"] = args.max_epochs
    return ExperimentConfig.from_dict(d)


def cmd_sweep_sigma(args) -> int:
    cfg = _experiment(args)
    out = _out_dir(args)
    _write_json(out / "sweep_sigma_config.json", cfg.to_dict())
    rows = run_sweep(cfg, [cfg.data.n_train], out / "sweep_sigma.csv")
    print(json.dumps({"new_rows": len(rows), "failed": sum(r["status"] != "ok" for r in rows)}))
    return EXIT_OK


def cmd_sweep_n(args) -> int:
    cfg = _experiment(args)
    if not cfg.n_grid:
        raise ConfigError("sweep-n needs a non-empty n_grid")
    out = _out_dir(args)
    _write_json(out / "sweep_n_config.json", cfg.to_dict())
    rows = run_sweep(cfg, cfg.n_grid, out / "sweep_n.csv")
    print(json.dumps({"new_rows": len(rows), "failed": sum(r["status"] != "ok" for r in rows)}))
    return EXIT_OK


def meta_gam_compare(model, sampler, test: np.ndarray, *, knots: int = 32, N: int = 10_000, m: int = 1000,
                     seed: int = 0, sinkhorn: ot.SinkhornConfig | None = None):
    """Fit the additive summary of ``model`` and score both generators against ``test``."""
    sinkhorn = sinkhorn or ot.SinkhornConfig()
    fit = meta_gam.fit_gam(model, sampler, N, meta_gam.BasisSpec(knots), seed)
    gam = meta_gam.gam_generator(fit)
    w_mle = evaluate_model(model, sampler, test, m, seed, sinkhorn)["w1"]
    w_gam = evaluate_model(gam, sampler, test, m, seed, sinkhorn)["w1"]
    return fit, {"seed": seed, "w1_mle": w_mle, "w1_gam": w_gam, "gap": w_gam - w_mle}


def cmd_meta_gam(args) -> int:
    d = _load_json(args.config)
    ck = sieve_mle.load_checkpoint(args.checkpoint)
    test = synthetic.read_csv(args.test)
    seed = args.seed if args.seed is not None else (ck["seed"] or 0)
    knots = args.knots or d.get("knots_per_dim", 32)
    fit, row = meta_gam_compare(ck["model"], ck["sampler"], test, knots=knots, N=d.get("N", 10_000),
                                m=args.m or d.get("eval_m", min(1000, len(test))), seed=seed,
                                sinkhorn=_sinkhorn_from(d))
    out = _out_dir(args)
    meta_gam.save_fit(out / "gam.json", fit)
    meta_gam.write_components_csv(out / "gam_components.csv", fit)
    row["config_hash"] = _hash({"checkpoint": Path(args.checkpoint).read_text(), "config": d, "knots": knots})
    cmp_path = out / "gam_comparison.csv"
    cmp_path.unlink(missing_ok=True)
    append_row(cmp_path, row, ["seed", "w1_mle", "w1_gam", "gap", "config_hash"])
    print(json.dumps(row))
    return EXIT_OK


def cmd_report(args) -> int:
    rows = []
    for p in args.input:
        if not Path(p).exists():
            raise ConfigError(f"no such sweep file: {p}")
        rows += read_rows(p)
    out = _out_dir(args)
    summary = summarize(rows)
    if summary:
        with open(out / "report.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(summary[0]))
            w.writeheader()
            w.writerows(summary)
    selected = {"val_iwae": select_sigma(rows, "val_iwae")}
    if any(r.get("val_w1") not in (None, "", "nan") for r in rows):
        selected["val_w1"] = select_sigma(rows, "val_w1")
    _write_json(out / "selected_sigma.json", {k: {str(n): s for n, s in v.items()} for k, v in selected.items()})
    failed = sum(r.get("status", "ok") != "ok" for r in rows)
    print(json.dumps({"groups": len(summary), "rows": len(rows), "failed": failed}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sievegen", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON configuration file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", default=".", help="output directory")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("gen-data", cmd_gen_data, "draw a synthetic data set")
    sp.add_argument("--case", choices=synthetic.CASES)
    sp.add_argument("--n", type=int, help="training rows")
    sp.add_argument("--n-val", type=int)
    sp.add_argument("--n-test", type=int)
    sp.add_argument("--sigma-star", type=float)

    for name, fn, help_ in (("train", cmd_train, "fit one sieve MLE"),
                            ("prune-train", lambda a: cmd_train(a, prune=True), "fit with two pruning rounds")):
        sp = add(name, fn, help_)
        sp.add_argument("--data", help="training CSV")
        sp.add_argument("--val", help="validation CSV")
        sp.add_argument("--max-epochs", type=int)
        if name == "train":
            sp.add_argument("--prune", action="store_true")

    sp = add("eval-w1", cmd_eval_w1, "estimated W1 of a checkpoint against test data")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--test", required=True)
    sp.add_argument("--m", type=int)

    for name, fn, help_ in (("sweep-sigma", cmd_sweep_sigma, "sweep the perturbation level"),
                            ("sweep-n", cmd_sweep_n, "sweep the training sample size")):
        sp = add(name, fn, help_)
        sp.add_argument("--seeds", type=int, nargs="+")
        sp.add_argument("--sigma-grid", type=float, nargs="+")
        sp.add_argument("--n-grid", type=int, nargs="+")
        sp.add_argument("--workers", type=int)
        sp.add_argument("--max-epochs", type=int)

    sp = add("meta-gam", cmd_meta_gam, "additive summary of a checkpoint and its W1 comparison")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--test", required=True)
    sp.add_argument("--knots", type=int)
    sp.add_argument("--m", type=int)

    sp = add("report", cmd_report, "aggregate sweep CSVs")
    sp.add_argument("--input", nargs="+", required=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except NUMERIC_ERRORS as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError, KeyError, TypeError, OSError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
