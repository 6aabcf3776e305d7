#!/usr/bin/env python3
"""Run the desk-scale experiment set through the ``sievegen`` CLI.

    python scripts/run_experiments.py --out runs/            # everything
    python scripts/run_experiments.py --out runs/ --only sigma gam

Sweeps are resumable, so an interrupted invocation can be restarted with the
same arguments.
"""
import argparse
import statistics
import sys
from pathlib import Path

from sievegen.cli import main as sievegen, read_rows

CONFIGS = Path(__file__).resolve().parent / "configs"
STEPS = ("sigma", "n", "prune", "gam")


def run(argv):
    print("+ sievegen " + " ".join(argv), flush=True)
    code = sievegen(argv)
    if code != 0:
        sys.exit(code)


def sigma_sweep(out: Path, workers: int):
    run(["sweep-sigma", "--config", str(CONFIGS / "case1_sigma.json"), "--workers", str(workers),
         "--out", str(out / "case1_sigma")])
    run(["report", "--input", str(out / "case1_sigma" / "sweep_sigma.csv"), "--out", str(out / "case1_sigma")])


def n_sweep(out: Path, workers: int):
    run(["sweep-n", "--config", str(CONFIGS / "case2_n.json"), "--workers", str(workers),
         "--out", str(out / "case2_n")])
    run(["report", "--input", str(out / "case2_n" / "sweep_n.csv"), "--out", str(out / "case2_n")])


def prune(out: Path, workers: int):
    run(["prune-train", "--config", str(CONFIGS / "case1_prune.json"), "--seed", "0", "--out", str(out / "prune")])


def gam(out: Path, workers: int):
    for case in ("model1", "model2"):
        data = out / "data" / case
        run(["gen-data", "--case", case, "--n", "10000", "--n-val", "1000", "--n-test", "1000", "--seed", "0",
             "--out", str(data)])
        for seed in (0, 1, 2):
            run_dir = out / "gam" / case / f"seed{seed}"
            run(["train", "--config", str(CONFIGS / "model_train.json"), "--data", str(data / f"{case}_train.csv"),
                 "--val", str(data / f"{case}_val.csv"), "--seed", str(seed), "--out", str(run_dir)])
            run(["meta-gam", "--config", str(CONFIGS / "meta_gam.json"), "--checkpoint",
                 str(run_dir / "checkpoint.json"), "--test", str(data / f"{case}_test.csv"), "--out", str(run_dir)])
    for case in ("model1", "model2"):
        gaps = [float(r["gap"]) for p in sorted((out / "gam" / case).glob("seed*/gam_comparison.csv"))
                for r in read_rows(p)]
        print(f"{case}: median W1 gap (GAM - sieve) {statistics.median(gaps):.4f} over {len(gaps)} seeds")


def parse_args(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", type=Path, default=Path("runs"))
    p.add_argument("--only", nargs="+", choices=STEPS, default=list(STEPS))
    p.add_argument("--workers", type=int, default=1)
    return p.parse_args(argv)


if __name__ == "__main__":
    args = parse_args()
    steps = {"sigma": sigma_sweep, "n": n_sweep, "prune": prune, "gam": gam}
    for name in args.only:
        steps[name](args.out, args.workers)
