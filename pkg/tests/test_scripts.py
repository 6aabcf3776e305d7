import json
from pathlib import Path

from sievegen.cli import ExperimentConfig
from sievegen.sieve_mle import TrainConfig
from sievegen.synthetic import SyntheticSpec

CONFIGS = Path(__file__).resolve().parents[1] / "scripts" / "configs"


def _load(name):
    return json.loads((CONFIGS / name).read_text())


def test_sweep_configs_parse():
    for name in ("case1_sigma.json", "case2_n.json"):
        cfg = ExperimentConfig.from_dict(_load(name))
        assert cfg.seeds == [0, 1, 2]


def test_train_configs_parse():
    TrainConfig.from_dict(_load("model_train.json"))
    d = _load("case1_prune.json")
    SyntheticSpec(**d.pop("data"))
    d.pop("retrain_epochs")
    TrainConfig.from_dict(d)
    assert set(_load("meta_gam.json")) == {"N", "knots_per_dim", "eval_m"}
