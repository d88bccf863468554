import json

import pytest

from querycrop.config import ExperimentConfig
from querycrop.reward import RewardWeights


def test_defaults():
    cfg = ExperimentConfig()
    assert cfg.env.pool_size == 20 and cfg.train.steps == 2000
    assert cfg.eval_ks == (1, 5, 10, 20) and cfg.cond_ks == (1, 5, 10)
    assert cfg.n_eval == 500


def test_from_dict_round_trip(tmp_path):
    d = {"env": {"H": 8, "W": 8, "seed": 3}, "anchors": {"scales": [0.5, 1.0], "stride": 1},
         "train": {"steps": 10, "weights": [0.4, 0.2, 0.2, 0.2], "eta": 2.0},
         "baselines": ["full"], "ablation_masks": ["mrr"], "n_eval": 7}
    (tmp_path / "c.json").write_text(json.dumps(d))
    cfg = ExperimentConfig.load(tmp_path / "c.json")
    assert cfg.env.H == 8 and cfg.scales == (0.5, 1.0) and cfg.stride == 1
    assert cfg.train.weights == RewardWeights(0.4, 0.2, 0.2, 0.2) and cfg.train.eta == 2.0
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg


def test_seed_override():
    cfg = ExperimentConfig().with_seed(9)
    assert cfg.env.seed == 9 and cfg.train.seed == 9
    with pytest.raises(ValueError):
        ExperimentConfig().with_seed(-1)


@pytest.mark.parametrize("d", [
    {"eval_ks": [1, 50]},
    {"baselines": ["oracle"]},
    {"ablation_masks": ["rank"]},
    {"bogus": 1},
    {"env": {"height": 3}},
    {"anchors": {"scale": [1.0]}},
    {"center_fraction": 0},
])
def test_invalid(d):
    with pytest.raises((ValueError, TypeError)):
        ExperimentConfig.from_dict(d)


def test_missing_paths(tmp_path):
    cfg = ExperimentConfig(area_file=str(tmp_path / "nope.txt"))
    assert cfg.missing_paths() == [str(tmp_path / "nope.txt")]
