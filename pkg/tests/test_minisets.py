# tests/test_minisets.py
from __future__ import annotations

import numpy as np
import orjson
import pytest
from pydantic import ValidationError

from distgeo.errors import InvalidArgumentError
from distgeo.geometry import CoordinateTable, center, gram
from distgeo.losses import overlap_consistency
from distgeo.minisets import (
    MinisetConfig,
    MinisetSampler,
    locality_weights,
    sample_miniset,
    sample_paired_minisets,
    shared_size,
    target_factor,
    write_minisets,
)


@pytest.fixture()
def slide(rng):
    return CoordinateTable.from_array(rng.uniform(size=(200, 2)))


@pytest.fixture()
def cfg():
    return MinisetConfig(n_min=20, n_max=40, min_overlap=10, tau_spatial=0.1, latent_dim=8, seed=3)


# ---------- targets ----------

def test_target_factor_is_zero_padded(planar_points):
    V = target_factor(planar_points[:5], 8)
    assert V.shape == (5, 8)
    assert np.allclose(V @ V.T, gram(center(planar_points[:5])), atol=1e-12)


def test_locality_weights_normalized_and_decreasing(slide):
    w = locality_weights(slide, 0, tau=0.1)
    assert w[0] == 0.0
    assert w.sum() == pytest.approx(1.0)
    d = np.linalg.norm(slide.coords - slide.coords[0], axis=1)
    near, far = np.argsort(d)[1], np.argsort(d)[-1]
    assert w[near] > w[far]


# ---------- single minisets ----------

def test_sample_miniset_size_and_uniqueness(slide, cfg, rng):
    m = sample_miniset(slide, cfg, rng)
    assert cfg.n_min <= m.indices.size <= cfg.n_max
    assert np.unique(m.indices).size == m.indices.size
    assert m.indices[0] == m.center
    assert m.target.shape == (m.indices.size, cfg.latent_dim)


def test_sample_miniset_is_local(slide, cfg, rng):
    # with a small temperature the drawn points sit closer to the center than random ones
    m = sample_miniset(slide, cfg, rng)
    d = np.linalg.norm(slide.coords[m.indices] - slide.coords[m.center], axis=1)
    d_all = np.linalg.norm(slide.coords - slide.coords[m.center], axis=1)
    assert d.mean() < d_all.mean()


def test_small_slide_rejected(cfg, rng):
    tiny = CoordinateTable.from_array(rng.uniform(size=(10, 2)))
    with pytest.raises(InvalidArgumentError):
        sample_miniset(tiny, cfg, rng)


def test_config_rejects_inverted_bounds():
    with pytest.raises(ValidationError):
        MinisetConfig(n_min=50, n_max=40)


# ---------- pairs ----------

def test_shared_size_respects_floor(cfg):
    assert shared_size(20, cfg) == 10
    assert shared_size(40, cfg) == 20


def test_paired_minisets_contain_the_shared_set(slide, cfg, rng):
    pair = sample_paired_minisets(slide, cfg, rng)
    assert np.isin(pair.shared, pair.a.indices).all()
    assert np.isin(pair.shared, pair.b.indices).all()
    assert pair.shared.size >= cfg.min_overlap
    assert pair.a.indices.size == pair.b.indices.size
    assert pair.a.center == pair.b.center


def test_sampler_is_reproducible(slide, cfg):
    a = MinisetSampler(slide, cfg).pairs(3)
    b = MinisetSampler(slide, cfg).pairs(3)
    for x, y in zip(a, b):
        assert np.array_equal(x.a.indices, y.a.indices)
        assert np.array_equal(x.shared, y.shared)


def test_write_minisets(tmp_path, slide, cfg):
    pairs = MinisetSampler(slide, cfg).pairs(2)
    path = write_minisets(pairs, tmp_path, cfg)
    doc = orjson.loads(path.read_bytes())
    assert doc["seed"] == cfg.seed
    assert len(doc["pairs"]) == 2
    assert (tmp_path / doc["pairs"][0]["a"]["file"]).exists()
    assert doc["pairs"][1]["shared"] == pairs[1].shared.tolist()


def test_full_overlap_gives_identical_views(slide, rng):
    cfg = MinisetConfig(n_min=20, n_max=30, min_overlap=10, alpha=1.0, latent_dim=4)
    pair = sample_paired_minisets(slide, cfg, rng)
    assert sorted(pair.a.indices.tolist()) == sorted(pair.b.indices.tolist())


def test_shared_targets_agree_up_to_pose(slide, cfg, rng):
    pair = sample_paired_minisets(slide, cfg, rng)
    Va = pair.a.target[np.isin(pair.a.indices, pair.shared)]
    Vb = pair.b.target[np.isin(pair.b.indices, pair.shared)]
    assert overlap_consistency(Va, Vb).shape < 1e-9
