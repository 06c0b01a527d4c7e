# tests/test_stitching.py
from __future__ import annotations

import math

import numpy as np
import pytest

from distgeo.errors import CsvFormatError, InvalidArgumentError, InvalidInputError
from distgeo.geometry import pairwise_distances
from distgeo.patches import PatchCover
from distgeo.stitching import (
    DistanceMeasurementSet,
    StitchConfig,
    StitchedGraph,
    aggregate_edges,
    extract_patch_edges,
    overlap_disagreement,
    patch_reliabilities,
    relative_spread,
    stitch,
    uniform_reliabilities,
    weighted_median,
)


def _measurements(rows):
    i, j, d, p = zip(*rows)
    return DistanceMeasurementSet(i=i, j=j, d_hat=d, patch=p)


# ---------- extraction ----------

def test_three_points_give_all_pairs():
    V = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]])
    m = extract_patch_edges(V, [7, 3, 9], k=2, patch=4)
    assert sorted(zip(m.i.tolist(), m.j.tolist())) == [(3, 7), (3, 9), (7, 9)]
    assert set(m.patch.tolist()) == {4}


def test_extraction_matches_brute_force(planar_points):
    ids = np.arange(100, 150)
    m = extract_patch_edges(planar_points, ids, k=10)
    D = pairwise_distances(planar_points)
    expected = set()
    for a in range(50):
        order = [b for b in np.argsort(D[a], kind="stable") if b != a][:10]
        expected |= {(min(a, b) + 100, max(a, b) + 100) for b in order}
    got = set(zip(m.i.tolist(), m.j.tolist()))
    assert got == expected
    assert np.allclose(m.d_hat, D[m.i - 100, m.j - 100], atol=1e-12)


def test_extraction_drops_zero_distances():
    V = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 0.0]])
    m = extract_patch_edges(V, [0, 1, 2], k=2)
    assert (0, 1) not in set(zip(m.i.tolist(), m.j.tolist()))
    assert np.all(m.d_hat > 0)


def test_extraction_rejects_large_k(planar_points):
    with pytest.raises(InvalidArgumentError):
        extract_patch_edges(planar_points[:5], range(5), k=5)


def test_measurements_must_be_normalized():
    with pytest.raises(InvalidInputError):
        _measurements([(2, 1, 1.0, 0)])


# ---------- reliability ----------

def test_disagreement_of_rigid_motion_is_zero(planar_points, random_rotation):
    Vq = planar_points @ random_rotation(0.6) + 4.0
    idx = np.arange(20)
    assert overlap_disagreement(planar_points, Vq, idx, idx) == pytest.approx(0.0, abs=1e-10)


def test_disagreement_of_doubled_patch_is_log_two(planar_points):
    idx = np.arange(20)
    assert overlap_disagreement(planar_points, 2.0 * planar_points, idx, idx) == pytest.approx(math.log(2.0))


def test_small_overlap_is_skipped(planar_points):
    idx = np.arange(4)
    assert overlap_disagreement(planar_points, planar_points, idx, idx, min_cells=5) is None


def test_reliabilities_all_consistent():
    rel = patch_reliabilities({(0, 1): 0.0, (1, 2): 0.0}, 3)
    assert np.array_equal(rel.weights, np.ones(3))


def test_reliabilities_with_outlier():
    rel = patch_reliabilities({(0, 1): 1.0, (2, 3): 1.0, (4, 5): 1.0, (6, 7): 10.0}, 8)
    assert rel.weights[:6] == pytest.approx(np.full(6, math.exp(-1.0)))
    assert rel.weights[6] == pytest.approx(math.exp(-10.0))
    assert rel.weights[6] == pytest.approx(4.54e-5, rel=1e-3)


def test_reliability_without_partners_is_one():
    rel = patch_reliabilities({}, 1)
    assert rel.weights.tolist() == [1.0]


# ---------- robust statistics ----------

def test_weighted_median_resists_outlier():
    assert weighted_median([1.0, 1.1, 5.0], [1.0, 1.0, 1.0]) == 1.1


def test_weighted_median_follows_weight():
    assert weighted_median([1.0, 1.1, 5.0], [0.01, 0.01, 1.0]) == 5.0


def test_weighted_median_equal_weights_is_lower_median():
    assert weighted_median([4.0, 1.0, 3.0, 2.0], [0.5] * 4) == 2.0


def test_relative_spread_linear_quartiles():
    assert relative_spread([1.0, 1.1, 5.0]) == pytest.approx((3.05 - 1.05) / 1.1)


# ---------- aggregation ----------

def test_aggregate_pair_statistics():
    m = _measurements([(0, 1, 5.0, 2), (0, 1, 1.0, 0), (0, 1, 1.1, 1), (0, 2, 2.0, 0)])
    g = aggregate_edges(m, uniform_reliabilities(3), StitchConfig(tau_spread=10.0, min_support=2), n_nodes=3)
    assert g.n_edges == 1
    assert (g.i[0], g.j[0]) == (0, 1)
    assert g.d[0] == 1.1
    assert g.count[0] == 3
    spread = (3.05 - 1.05) / 1.1
    assert g.spread[0] == pytest.approx(spread)
    assert g.omega[0] == pytest.approx(math.sqrt(3) / (1 + spread))


def test_aggregate_drops_high_spread():
    m = _measurements([(0, 1, 5.0, 2), (0, 1, 1.0, 0), (0, 1, 1.1, 1)])
    g = aggregate_edges(m, uniform_reliabilities(3), StitchConfig(tau_spread=0.5), n_nodes=2)
    assert g.n_edges == 0


def test_aggregate_uses_reliability_weights():
    m = _measurements([(0, 1, 1.0, 0), (0, 1, 1.1, 1), (0, 1, 1.2, 2)])
    rel = patch_reliabilities({(0, 1): 0.1, (0, 2): 0.1, (1, 2): 5.0}, 3)
    g = aggregate_edges(m, rel, StitchConfig(), n_nodes=2)
    # patches 1 and 2 disagree most, so patch 0 carries the median
    assert g.d[0] == 1.0


def test_aggregate_is_permutation_invariant(rng):
    rows = []
    for p in range(4):
        for a in range(6):
            for b in range(a + 1, 6):
                rows.append((a, b, 1.0 + a + b + 0.01 * rng.random(), p))
    m = _measurements(rows)
    perm = rng.permutation(len(rows))
    shuffled = _measurements([rows[k] for k in perm])
    rel = uniform_reliabilities(4)
    g1 = aggregate_edges(m, rel, n_nodes=6)
    g2 = aggregate_edges(shuffled, rel, n_nodes=6)
    assert g1.to_frame().equals(g2.to_frame())


def test_aggregate_scaling_scales_distance_only(rng):
    rows = [(0, 1, 1.0 + 0.1 * rng.random(), p) for p in range(5)]
    base = aggregate_edges(_measurements(rows), uniform_reliabilities(5), n_nodes=2)
    scaled = aggregate_edges(_measurements([(a, b, 3.0 * d, p) for a, b, d, p in rows]), uniform_reliabilities(5), n_nodes=2)
    assert scaled.d[0] == pytest.approx(3.0 * base.d[0])
    assert scaled.spread[0] == pytest.approx(base.spread[0])


def test_stitched_graph_csv_roundtrip(tmp_path):
    m = _measurements([(0, 1, 1.0, 0), (0, 1, 1.0, 1), (1, 2, 2.0, 0), (1, 2, 2.0, 1)])
    g = aggregate_edges(m, uniform_reliabilities(2), n_nodes=3)
    path = tmp_path / "stitched.csv"
    g.to_csv(path)
    back = StitchedGraph.read_csv(path, 3)
    assert back.to_frame().equals(g.to_frame())


def test_stitched_graph_read_rejects_bad_header(tmp_path):
    path = tmp_path / "stitched.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(CsvFormatError):
        StitchedGraph.read_csv(path, 3)


# ---------- end to end ----------

def test_stitch_exact_geometries_recovers_distances(rng, random_rotation):
    gt = rng.uniform(size=(60, 2))
    patches = (np.arange(0, 40), np.arange(20, 60))
    cover = PatchCover(patches=patches, neighbors=((0, 1),), n_cells=60)
    geometries = [gt[p] @ random_rotation(0.3 * (k + 1)) + k for k, p in enumerate(patches)]
    result = stitch(geometries, cover, StitchConfig(knn_extract=8))
    g = result.graph
    assert g.n_edges > 0
    assert np.allclose(g.d, np.linalg.norm(gt[g.i] - gt[g.j], axis=1), atol=1e-12)
    assert np.all(g.spread < 1e-12)
    # only overlap cells are measured by two patches
    assert np.all((g.i >= 20) & (g.j < 40))
    assert result.reliability.weights[0] == pytest.approx(result.reliability.weights[1])


def test_stitch_uniform_weighting(rng):
    gt = rng.uniform(size=(30, 2))
    cover = PatchCover(patches=(np.arange(30), np.arange(30)), neighbors=((0, 1),), n_cells=30)
    geometries = [gt, 1.5 * gt]
    result = stitch(geometries, cover, StitchConfig(knn_extract=5, tau_spread=1.0), weighting="uniform")
    assert np.array_equal(result.reliability.weights, np.ones(2))


def test_stitch_geometry_count_mismatch(rng):
    cover = PatchCover(patches=(np.arange(5),), neighbors=(), n_cells=5)
    with pytest.raises(InvalidArgumentError):
        stitch([], cover)


def test_single_patch_keeps_its_edges(rng):
    gt = rng.uniform(size=(25, 2))
    cover = PatchCover(patches=(np.arange(25),), neighbors=(), n_cells=25)
    result = stitch([gt], cover, StitchConfig(knn_extract=4))
    g = result.graph
    assert g.n_edges > 0
    assert np.all(g.count == 1)
    assert np.allclose(g.d, np.linalg.norm(gt[g.i] - gt[g.j], axis=1), atol=1e-12)
