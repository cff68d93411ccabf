import pytest

from deconfrec.config import ExperimentConfig, from_dict, load_config
from deconfrec.errors import ConfigError


def test_defaults_follow_training_settings():
    cfg = ExperimentConfig()
    assert cfg.train.batch_size == 512
    assert (cfg.train.stage1_lr, cfg.train.stage2_plugin_lr) == (1e-3, 1e-4)
    assert cfg.grouping.n == 5
    assert cfg.dataset.train_neg_ratio == 4 and cfg.dataset.test_negatives == 99


def test_roundtrip(tmp_path):
    cfg = load_config("configs/quickstart.yaml")
    cfg.train.frozen = ("emb.item",)
    cfg.dump(tmp_path / "c.yaml")
    back = load_config(tmp_path / "c.yaml")
    assert back == cfg
    assert from_dict(cfg.to_dict()) == cfg


def test_missing_dataset_path():
    cfg = from_dict({"dataset": {"kind": "file", "path": "/nope/ratings.dat",
                                 "format": "movielens-dat"}})
    with pytest.raises(ConfigError, match="dataset.path"):
        cfg.validate()
    with pytest.raises(ConfigError, match="dataset.path"):
        from_dict({"dataset": {"kind": "file"}}).validate()


@pytest.mark.parametrize("raw,msg", [
    ({"bogus": 1}, "unknown top-level"),
    ({"model": {"arch": "mlp"}}, "model.arch"),
    ({"model": {"depth": 3}}, "unknown keys in model"),
    ({"grouping": {"mode": "age"}}, "grouping.mode"),
    ({"eval": {"tie_policy": "coin"}}, "tie_policy"),
    ({"dataset": {"synth": {"activeness_ranges": [[5, 2]]}}}, "dataset.synth"),
    ({"train": {"stage1_lr": -1}}, "learning rates"),
])
def test_invalid(raw, msg):
    with pytest.raises(ConfigError, match=msg):
        from_dict(raw).validate()


def test_with_seed():
    cfg = ExperimentConfig().with_seed(9)
    assert cfg.seed == cfg.train.seed == cfg.dataset.synth.seed == 9


def test_bad_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "none.yaml")
    p = tmp_path / "bad.yaml"
    p.write_text("seed: [1,\n")
    with pytest.raises(ConfigError, match="parse"):
        load_config(p)
