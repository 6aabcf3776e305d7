import csv
import json
import math

import numpy as np
import pytest

from sievegen import cli, sieve_mle, synthetic
from sievegen.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, ExperimentConfig, ConfigError, main

TINY_TRAIN = {"latent_dim": 1, "widths": [8], "K": 2, "batch": 50, "max_epochs": 2}
BAD_SINKHORN = {"max_iter": 1, "tol": 1e-15, "anneal": False, "newton": False}


def _write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def case1_files(tmp_path):
    d = tmp_path / "data"
    assert main(["gen-data", "--case", "case1", "--n", "200", "--n-val", "100", "--n-test", "100",
                 "--seed", "0", "--out", str(d)]) == EXIT_OK
    return {k: str(d / f"case1_{k}.csv") for k in ("train", "val", "test")}


def _sweep_config(tmp_path, **over):
    cfg = {"data": {"case": "case1", "n_train": 150, "n_val": 50, "n_test": 60, "seed": 1},
           "train": TINY_TRAIN, "sigma_grid": [0.0], "seeds": [0], "eval_m": 60}
    cfg.update(over)
    return _write(tmp_path / "sweep.json", cfg)


# gen-data

def test_gen_data_case2_radii(tmp_path):
    assert main(["gen-data", "--case", "case2", "--n", "100", "--seed", "3", "--out", str(tmp_path)]) == 0
    X = synthetic.read_csv(tmp_path / "case2_train.csv")
    assert X.shape == (100, 2)
    np.testing.assert_allclose(np.linalg.norm(X, axis=1), 2.0, atol=1e-12)
    side = json.loads((tmp_path / "case2.json").read_text())
    assert side["seed"] == 3 and side["spec"]["case"] == "case2"


def test_gen_data_sphere_radii(tmp_path):
    assert main(["gen-data", "--case", "sphere", "--n", "1000", "--seed", "0", "--out", str(tmp_path)]) == 0
    X = synthetic.read_csv(tmp_path / "sphere_train.csv")
    np.testing.assert_allclose(np.linalg.norm(X, axis=1), 1.0, atol=1e-12)


def test_gen_data_repeatable(tmp_path):
    for sub in ("a", "b"):
        main(["gen-data", "--case", "swiss_roll", "--n", "50", "--seed", "5", "--out", str(tmp_path / sub)])
    for name in ("swiss_roll_train.csv", "swiss_roll_test.csv", "swiss_roll.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


# train

def test_train_zero_epochs_is_initialisation(tmp_path, case1_files):
    cfg = _write(tmp_path / "t.json", {**TINY_TRAIN, "max_epochs": 0})
    out = tmp_path / "run"
    assert main(["train", "--config", cfg, "--data", case1_files["train"], "--val", case1_files["val"],
                 "--seed", "4", "--out", str(out)]) == EXIT_OK
    ck = sieve_mle.load_checkpoint(out / "checkpoint.json")
    tc = sieve_mle.TrainConfig.from_dict({**TINY_TRAIN, "max_epochs": 0, "seed": 4})
    gen, _ = sieve_mle.init_models(tc, 2)
    np.testing.assert_array_equal(ck["model"].generator.flat(), gen.generator.flat())
    assert ck["model"].log_sigma == gen.log_sigma


def test_train_deterministic(tmp_path, case1_files):
    cfg = _write(tmp_path / "t.json", TINY_TRAIN)
    for sub in ("a", "b"):
        main(["train", "--config", cfg, "--data", case1_files["train"], "--val", case1_files["val"],
              "--seed", "2", "--out", str(tmp_path / sub)])
    assert (tmp_path / "a" / "checkpoint.json").read_bytes() == (tmp_path / "b" / "checkpoint.json").read_bytes()
    hist = _rows(tmp_path / "a" / "history.csv")
    assert len(hist) == 2 and {r["seed"] for r in hist} == {"2"}
    assert len({r["config_hash"] for r in hist}) == 1


def test_prune_train_half_zero(tmp_path, case1_files):
    cfg = _write(tmp_path / "t.json", {**TINY_TRAIN, "widths": [6, 6]})
    out = tmp_path / "pr"
    assert main(["prune-train", "--config", cfg, "--data", case1_files["train"], "--val", case1_files["val"],
                 "--seed", "0", "--out", str(out)]) == EXIT_OK
    ck = sieve_mle.load_checkpoint(out / "checkpoint.json")
    theta = ck["model"].generator.flat()
    assert np.sum(theta == 0.0) == len(theta) // 2
    assert np.all(theta[~ck["mask"].keep] == 0.0)
    stages = {r["stage"] for r in _rows(out / "history.csv")}
    assert stages == {"0", "1", "2"}
    assert json.loads((out / "train_summary.json").read_text())["zero_fraction"] == pytest.approx(0.5, abs=0.01)


def test_train_needs_validation(tmp_path, case1_files):
    assert main(["train", "--data", case1_files["train"], "--out", str(tmp_path)]) == EXIT_CONFIG


def test_train_from_config_data_section(tmp_path):
    cfg = _write(tmp_path / "t.json", {**TINY_TRAIN, "data": {"case": "case2", "n_train": 80, "n_val": 20}})
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_OK


# eval and meta-gam

def test_eval_and_meta_gam(tmp_path, case1_files):
    cfg = _write(tmp_path / "t.json", TINY_TRAIN)
    run = tmp_path / "run"
    main(["train", "--config", cfg, "--data", case1_files["train"], "--val", case1_files["val"], "--out", str(run)])
    assert main(["eval-w1", "--checkpoint", str(run / "checkpoint.json"), "--test", case1_files["test"],
                 "--m", "100", "--out", str(run)]) == EXIT_OK
    w1 = json.loads((run / "w1.json").read_text())
    assert w1["w1"] >= 0 and w1["M"] == 100
    gcfg = _write(tmp_path / "g.json", {"N": 500, "eval_m": 100})
    assert main(["meta-gam", "--config", gcfg, "--checkpoint", str(run / "checkpoint.json"),
                 "--test", case1_files["test"], "--knots", "12", "--out", str(run)]) == EXIT_OK
    comp = _rows(run / "gam_components.csv")
    assert len(comp) == 2 * 1 * 12
    for j in ("1", "2"):
        assert sum(r["j"] == j and r["l"] == "1" for r in comp) == 12
    cmp_rows = _rows(run / "gam_comparison.csv")
    assert len(cmp_rows) == 1 and float(cmp_rows[0]["w1_gam"]) >= 0


def test_meta_gam_gap_vanishes_for_additive_checkpoint(tmp_path, case1_files):
    # a one-dimensional latent makes any generator additive
    cfg = _write(tmp_path / "t.json", {**TINY_TRAIN, "activation": "relu", "widths": [3]})
    run = tmp_path / "run"
    main(["train", "--config", cfg, "--data", case1_files["train"], "--val", case1_files["val"], "--out", str(run)])
    ck = sieve_mle.load_checkpoint(run / "checkpoint.json")
    test = synthetic.read_csv(case1_files["test"])
    fit, row = cli.meta_gam_compare(ck["model"], ck["sampler"], test, knots=400, N=20_000, m=100)
    assert abs(row["gap"]) < 5e-3


def test_numeric_failure_exit_code(tmp_path, case1_files):
    cfg = _write(tmp_path / "t.json", TINY_TRAIN)
    run = tmp_path / "run"
    main(["train", "--config", cfg, "--data", case1_files["train"], "--val", case1_files["val"], "--out", str(run)])
    bad = _write(tmp_path / "bad.json", {"sinkhorn": BAD_SINKHORN})
    assert main(["eval-w1", "--config", bad, "--checkpoint", str(run / "checkpoint.json"),
                 "--test", case1_files["test"], "--out", str(run)]) == EXIT_NUMERIC


def test_config_error_exit_codes(tmp_path):
    assert main(["sweep-sigma", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == EXIT_CONFIG
    bad = _write(tmp_path / "bad.json", {"sigma_grid": [], "seeds": [0]})
    assert main(["sweep-sigma", "--config", bad, "--out", str(tmp_path)]) == EXIT_CONFIG
    typo = _write(tmp_path / "typo.json", {"sigmagrid": [0.1]})
    assert main(["sweep-sigma", "--config", typo, "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["sweep-n", "--config", _sweep_config(tmp_path), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["report", "--input", str(tmp_path / "nope.csv"), "--out", str(tmp_path)]) == EXIT_CONFIG


# sweeps

def test_sweep_single_point_and_resume(tmp_path):
    cfg = _sweep_config(tmp_path)
    out = tmp_path / "s"
    assert main(["sweep-sigma", "--config", cfg, "--out", str(out)]) == EXIT_OK
    rows = _rows(out / "sweep_sigma.csv")
    assert len(rows) == 1 and float(rows[0]["sigma_tilde"]) == 0.0 and rows[0]["status"] == "ok"
    assert float(rows[0]["w1_estimate"]) >= 0
    assert math.isnan(float(rows[0]["sigma_error"]))  # relative error undefined at sigma_star = sigma_tilde = 0
    main(["sweep-sigma", "--config", cfg, "--out", str(out)])
    assert len(_rows(out / "sweep_sigma.csv")) == 1
    main(["sweep-sigma", "--config", cfg, "--sigma-grid", "0.0", "0.3", "--out", str(out)])
    rows = _rows(out / "sweep_sigma.csv")
    keys = [cli.row_key(r) for r in rows]
    assert len(rows) == 2 and len(set(keys)) == 2
    assert float(rows[1]["sigma_error"]) >= 0


def test_sweep_records_failures_and_continues(tmp_path):
    cfg = _sweep_config(tmp_path, sinkhorn=BAD_SINKHORN, seeds=[0, 1])
    out = tmp_path / "s"
    assert main(["sweep-sigma", "--config", cfg, "--out", str(out)]) == EXIT_OK
    rows = _rows(out / "sweep_sigma.csv")
    assert len(rows) == 2
    assert all(r["status"].startswith("failed: SinkhornConvergenceError") for r in rows)


def test_sweep_n_and_report(tmp_path):
    cfg = _sweep_config(tmp_path, n_grid=[60, 120], sigma_grid=[0.1], data={
        "case": "case2", "n_train": 1, "n_val": 40, "n_test": 60, "seed": 0})
    out = tmp_path / "n"
    assert main(["sweep-n", "--config", cfg, "--out", str(out)]) == EXIT_OK
    rows = _rows(out / "sweep_n.csv")
    assert sorted(int(r["n"]) for r in rows) == [60, 120]
    assert len({r["config_hash"] for r in rows}) == 1
    assert main(["report", "--input", str(out / "sweep_n.csv"), "--out", str(out)]) == EXIT_OK
    report = _rows(out / "report.csv")
    assert [int(r["n"]) for r in report] == [60, 120]
    sel = json.loads((out / "selected_sigma.json").read_text())
    assert sel["val_iwae"] == {"60": 0.1, "120": 0.1}


def test_sweep_rerun_reproduces_numbers(tmp_path):
    cfg = _sweep_config(tmp_path, sigma_grid=[0.2])
    for sub in ("a", "b"):
        main(["sweep-sigma", "--config", cfg, "--out", str(tmp_path / sub)])
    a, b = _rows(tmp_path / "a" / "sweep_sigma.csv"), _rows(tmp_path / "b" / "sweep_sigma.csv")
    for k in ("sigma_hat", "w1_estimate", "val_iwae", "selected_epoch", "config_hash"):
        assert a[0][k] == b[0][k]


# config objects

def test_experiment_config_validation():
    with pytest.raises(ConfigError):
        ExperimentConfig(seeds=[1, 1])
    with pytest.raises(ConfigError):
        ExperimentConfig(sigma_grid=[-0.1])
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"train": {"widths": [4], "bogus": 1}})


def test_experiment_config_roundtrip_and_hash():
    cfg = ExperimentConfig.from_dict({"train": TINY_TRAIN, "sigma_grid": [0.0, 0.1], "seeds": [0, 1]})
    again = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg
    assert again.run_hash() == cfg.run_hash()
    wider = ExperimentConfig.from_dict({"train": TINY_TRAIN, "sigma_grid": [0.5], "seeds": [7]})
    assert wider.run_hash() == cfg.run_hash()
    other = ExperimentConfig.from_dict({"train": {**TINY_TRAIN, "lr": 0.01}})
    assert other.run_hash() != cfg.run_hash()


def test_select_sigma_criteria():
    rows = [{"n": 100, "sigma_tilde": s, "seed": k, "status": "ok", "sigma_error": 0.1, "val_iwae": v, "val_w1": w,
             "w1_estimate": w} for k in range(3) for s, v, w in ((0.0, -2.0, 0.5), (0.1, -1.0, 0.3), (0.5, -1.5, 0.2))]
    assert cli.select_sigma(rows, "val_iwae") == {100: 0.1}
    assert cli.select_sigma(rows, "val_w1") == {100: 0.5}
    with pytest.raises(ConfigError):
        cli.select_sigma(rows, "loss")
    summary = cli.summarize(rows + [{**rows[0], "status": "failed: x", "w1_estimate": 99.0}])
    assert [s["runs"] for s in summary] == [3, 3, 3]
