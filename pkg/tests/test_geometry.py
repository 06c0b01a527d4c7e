# tests/test_geometry.py
from __future__ import annotations

import numpy as np
import pytest

from distgeo.errors import CsvFormatError, InvalidArgumentError, InvalidInputError
from distgeo.geometry import (
    CoordinateTable,
    DistanceTable,
    canonical_factor,
    center,
    gram,
    knn_indices,
    neighbor_order,
    pairwise_distances,
    procrustes_align,
    procrustes_residual,
)


# ---------- center / gram ----------

def test_center_removes_mean(planar_points):
    P = center(planar_points + 5.0)
    assert np.allclose(P.mean(axis=0), 0.0, atol=1e-12)


def test_center_single_point_is_zero():
    assert np.allclose(center([[3.0, 4.0]]), 0.0)


def test_center_rejects_nan():
    with pytest.raises(InvalidInputError):
        center([[0.0, np.nan]])


def test_gram_is_symmetric_psd(planar_points):
    G = gram(center(planar_points))
    assert np.array_equal(G, G.T)
    assert np.linalg.eigvalsh(G).min() > -1e-10


# ---------- canonical_factor ----------

def test_canonical_factor_reproduces_gram(planar_points):
    G = gram(center(planar_points))
    V = canonical_factor(G, 2)
    assert np.allclose(V @ V.T, G, atol=1e-10)


def test_canonical_factor_sign_convention(planar_points):
    V = canonical_factor(gram(center(planar_points)), 2)
    for col in range(2):
        nz = np.flatnonzero(np.abs(V[:, col]) > 1e-12)
        assert V[nz[0], col] > 0


def test_canonical_factor_is_pose_invariant(planar_points, random_rotation):
    P = center(planar_points)
    Q = random_rotation(0.7, reflect=True)
    V1 = canonical_factor(gram(P), 2)
    V2 = canonical_factor(gram(P @ Q + 0.0), 2)
    assert np.allclose(V1, V2, atol=1e-8)


def test_canonical_factor_of_zero_matrix():
    assert np.array_equal(canonical_factor(np.zeros((4, 4)), 2), np.zeros((4, 2)))


def test_canonical_factor_rejects_asymmetric():
    G = np.array([[1.0, 0.5], [0.0, 1.0]])
    with pytest.raises(InvalidInputError):
        canonical_factor(G, 1)


def test_canonical_factor_rejects_bad_dimension():
    with pytest.raises(InvalidArgumentError):
        canonical_factor(np.eye(3), 4)


# ---------- procrustes ----------

def test_procrustes_recovers_rotation(planar_points, random_rotation):
    A = center(planar_points)
    Q_true = random_rotation(1.1)
    B = A @ Q_true
    Q, aligned = procrustes_align(A, B)
    assert np.allclose(Q, Q_true, atol=1e-10)
    assert np.allclose(aligned, B, atol=1e-10)


def test_procrustes_handles_reflection(planar_points, random_rotation):
    A = planar_points
    B = A @ random_rotation(0.3, reflect=True) + np.array([2.0, -1.0])
    assert procrustes_residual(A, B) < 1e-10


def test_procrustes_zero_cross_covariance_is_identity():
    Q, _ = procrustes_align(np.zeros((5, 2)), np.ones((5, 2)))
    assert np.array_equal(Q, np.eye(2))


def test_procrustes_shape_mismatch():
    with pytest.raises(InvalidArgumentError):
        procrustes_align(np.zeros((3, 2)), np.zeros((4, 2)))


# ---------- distances / neighborhoods ----------

def test_pairwise_distances_345():
    D = pairwise_distances([[0.0, 0.0], [3.0, 4.0]])
    assert D[0, 1] == pytest.approx(5.0)
    assert D[1, 0] == pytest.approx(5.0)
    assert np.all(np.diag(D) == 0.0)


def test_neighbor_order_ties_by_index():
    D = pairwise_distances([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 3.0]])
    assert neighbor_order(D)[0].tolist() == [1, 2, 3]


def test_knn_matches_brute_force(planar_points):
    k = 5
    expected = neighbor_order(pairwise_distances(planar_points))[:, :k]
    assert np.array_equal(knn_indices(planar_points, k), expected)


def test_knn_rejects_large_k(planar_points):
    with pytest.raises(InvalidArgumentError):
        knn_indices(planar_points, len(planar_points))


# ---------- coordinate tables ----------

def test_coordinate_table_csv_roundtrip(tmp_path, planar_table):
    path = tmp_path / "coords.csv"
    planar_table.to_csv(path)
    back = CoordinateTable.read_csv(path)
    assert back.ids == planar_table.ids
    assert np.array_equal(back.coords, planar_table.coords)


def test_coordinate_table_rejects_duplicate_ids():
    with pytest.raises(InvalidInputError):
        CoordinateTable(ids=("a", "a"), coords=np.zeros((2, 2)))


def test_read_csv_reports_line_number(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("id,x,y\na,0,0\nb,1,oops\n")
    with pytest.raises(CsvFormatError) as exc:
        CoordinateTable.read_csv(path)
    assert exc.value.line == 3
    assert ":3:" in str(exc.value)


def test_read_csv_rejects_wrong_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("cell,x,y\na,0,0\n")
    with pytest.raises(CsvFormatError) as exc:
        CoordinateTable.read_csv(path)
    assert exc.value.line == 1


def test_reindex_follows_requested_order(planar_table):
    ids = list(reversed(planar_table.ids))
    out = planar_table.reindex(ids)
    assert out.ids == tuple(ids)
    assert np.array_equal(out.coords, planar_table.coords[::-1])


def test_distance_table_csv(tmp_path, planar_table):
    table = DistanceTable(ids=planar_table.ids, matrix=pairwise_distances(planar_table.coords))
    path = tmp_path / "D.csv"
    table.to_csv(path)
    back = DistanceTable.read_csv(path)
    assert back.ids == table.ids
    assert np.array_equal(back.matrix, table.matrix)
    assert np.array_equal(back.reindex(table.ids[::-1]).matrix, table.matrix[::-1, ::-1])


def test_distance_table_header_must_list_row_ids(tmp_path):
    path = tmp_path / "D.csv"
    path.write_text("id,a,b\nb,0,1\na,1,0\n")
    with pytest.raises(CsvFormatError) as exc:
        DistanceTable.read_csv(path)
    assert exc.value.line == 1
