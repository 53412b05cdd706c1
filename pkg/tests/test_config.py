import json

import pytest

from coughfuse.config import RunConfig, override
from coughfuse.model import ModelConfig
from coughfuse.nn import ConfigurationError


def test_defaults_roundtrip_through_json(tmp_path):
    cfg = RunConfig()
    cfg.save(tmp_path / "c.json")
    back = RunConfig.load(tmp_path / "c.json")
    assert back == cfg and back.digest == cfg.digest
    assert RunConfig.load(None) == cfg


def test_digest_tracks_content():
    a = RunConfig()
    assert a.digest == RunConfig().digest and len(a.digest) == 64
    assert override(a, "seed", 1).digest != a.digest
    assert override(a, "model.lr", 0.01).digest != a.digest


def test_unknown_keys_are_rejected():
    with pytest.raises(ConfigurationError, match="colour"):
        RunConfig.from_dict({"colour": 1})
    with pytest.raises(ConfigurationError, match="batchsize"):
        RunConfig.from_dict({"train": {"batchsize": 8}})
    with pytest.raises(ConfigurationError):
        override(RunConfig(), "train.nope", 1)
    with pytest.raises(ConfigurationError):
        RunConfig.from_dict({"train": 5})


def test_override_sets_nested_values():
    cfg = override(RunConfig(), "model.widths", [4, 8])
    assert cfg.model.widths == (4, 8)
    cfg = override(cfg, "split.targets.train", 10)
    assert cfg.split.targets["train"] == 10
    assert override(cfg, "eval.threshold", 0.5).eval.threshold == 0.5


def test_desk_config_file_loads():
    import pathlib
    path = pathlib.Path(__file__).resolve().parents[1] / "configs" / "desk.json"
    cfg = RunConfig.load(path)
    assert cfg.model == ModelConfig(image_size=64, widths=(8, 16, 32), blocks_per_stage=2, stem_stride=2)
    assert cfg.split.targets == {"train": 200, "val": 20, "test": 20}
    assert json.loads(path.read_text())["seed"] == cfg.seed
