import json

import pytest

from switchseg import config
from switchseg.config import ConfigError, RunConfig


def test_defaults_round_trip():
    cfg = RunConfig()
    again = config.from_dict(cfg.to_dict())
    assert again == cfg


def test_echo_spells_out_every_section():
    d = json.loads(config.echo(RunConfig()))
    for key in ("loss", "model", "train", "augment", "grid", "post", "stain", "scene", "seed", "match"):
        assert key in d
    assert d["loss"]["lam"] == 0.8 and d["loss"]["tau"] == 0.2
    assert d["grid"] == {"size": 256, "stride": 192}


def test_partial_override(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 3, "loss": {"lam": 0.5}, "augment": {"rotations": [0, 180]}}))
    cfg = config.load(path)
    assert cfg.seed == 3 and cfg.loss.lam == 0.5 and cfg.loss.tau == 0.2
    assert cfg.augment.rotations == (0, 180)
    assert cfg.protocol().train.seed == 3


def test_augment_null_disables():
    assert config.from_dict({"augment": None}).augment is None


@pytest.mark.parametrize("data, needle", [
    ({"sed": 1}, "sed"),
    ({"loss": {"lambda": 0.5}}, "lambda"),
    ({"loss": {"lam": 2.0}}, "lambda"),
    ({"loss_name": "hinge"}, "loss_name"),
    ({"train": 5}, "object"),
    ({"shrink_fraction": 0}, "shrink_fraction"),
])
def test_rejects(data, needle):
    with pytest.raises(ConfigError, match=needle):
        config.from_dict(data)


def test_bad_json(tmp_path):
    (tmp_path / "c.json").write_text("{not json")
    with pytest.raises(ConfigError):
        config.load(tmp_path / "c.json")


def test_slide_config_carries_stain_settings():
    cfg = config.from_dict({"stain": {"mode": "none", "iters": 50}})
    s = cfg.slide_config()
    assert s.stain == "none" and s.stain_iters == 50
