# tests/test_config.py
from __future__ import annotations

import orjson
import pytest

from distgeo.config import SEEDED, PipelineConfig, dump_config, load_config
from distgeo.errors import ConfigError


def test_defaults():
    cfg = load_config()
    assert cfg == PipelineConfig()
    assert cfg.predictor == "oracle"
    assert cfg.weighting == "weighted"
    assert cfg.threads == 1


def test_file_then_overrides(small_config_file):
    cfg = load_config(small_config_file, overrides=["patch.n_patch=64", "weighting=uniform", "output_dir=out/x"])
    assert cfg.synthetic.n_cells == 300
    assert cfg.patch.n_patch == 64
    assert cfg.weighting == "uniform"
    assert cfg.output_dir == "out/x"


def test_override_values_parsed_as_json():
    cfg = load_config(overrides=["metrics.lrmse_ks=[3,6]", "spots.enabled=true"])
    assert cfg.metrics.lrmse_ks == (3, 6)
    assert cfg.spots.enabled is True


def test_seed_reaches_every_seeded_section():
    cfg = load_config(seed=9)
    assert cfg.seeds() == {name: 9 for name in SEEDED}


def test_dump_reloads(tmp_path, small_config):
    path = tmp_path / "dumped.json"
    path.write_bytes(orjson.dumps(dump_config(small_config)))
    assert load_config(path) == small_config


# ---------- failures ----------

@pytest.mark.parametrize(
    "overrides",
    [
        ["synthetic.n_cells=0"],
        ["synthetic.unknown=1"],
        ["predictor=model"],
        ["threads=0"],
        ["no_equals_sign"],
        ["threads.deeper=1"],
    ],
)
def test_bad_overrides_raise_config_error(overrides):
    with pytest.raises(ConfigError):
        load_config(overrides=overrides)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.json")


def test_non_object_document(tmp_path):
    path = tmp_path / "list.json"
    path.write_bytes(b"[1, 2]")
    with pytest.raises(ConfigError):
        load_config(path)


def test_malformed_json(tmp_path):
    path = tmp_path / "broken.json"
    path.write_bytes(b"{not json")
    with pytest.raises(ConfigError):
        load_config(path)
