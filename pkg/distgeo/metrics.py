"""
Evaluation of a predicted geometry against ground truth: global distance agreement,
near/far edge recovery, multi-scale shells, neighborhood trust and continuity,
distribution matching and local length-scale calibration, plus the distortion map.

All functions take dense distance matrices; `evaluate` derives them from coordinates
or takes them from an id-labeled distance table.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy.stats import rankdata, wasserstein_distance
from sklearn.metrics import average_precision_score

from .errors import IdMismatchError, InvalidArgumentError, InvalidInputError
from .geometry import (
    CoordinateTable,
    DistanceTable,
    _as_matrix,
    canonical_factor,
    center,
    neighbor_order,
    pairwise_distances,
    procrustes_align,
)
from .store import RunStore

SYMMETRY_TOL = 1e-9
MORTON_BITS = 16
DISTORTION_BLOCKS = 256


class MetricsConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    k: int = Field(20, ge=1)
    n_shells: int = Field(5, ge=1)
    n_projections: int = Field(128, ge=1)
    lrmse_ks: Tuple[int, ...] = (10, 20, 50, 100)
    shell_mode: Literal["radius", "quantile"] = "radius"
    random_projections: bool = False
    seed: int = 42

    @field_validator("lrmse_ks")
    @classmethod
    def _positive_ks(cls, v: Tuple[int, ...]) -> Tuple[int, ...]:
        if not v or any(k < 1 for k in v):
            raise ValueError("lrmse_ks must be a nonempty list of positive integers")
        return tuple(v)


class MetricsReport(BaseModel):
    spearman: float
    pearson: float
    stress1: float
    local_stress: float
    scale_err: float
    edge_roc_auc: float
    bap: float
    shell_f1_macro: float
    trust_at_k: float
    cont_at_k: float
    swd: float
    w1_knn: float
    cal_err: float
    lrmse: Dict[str, float]


@dataclass(frozen=True)
class DistortionMap:
    matrix: np.ndarray
    block: int
    epsilon: float
    scale: float
    order: np.ndarray

    def write(self, store: RunStore, stem: str = "distortion") -> None:
        store.put_csv(f"{stem}.csv", pd.DataFrame(self.matrix), header=False)
        store.put_json(
            f"{stem}.json",
            {"block": self.block, "epsilon": self.epsilon, "scale": self.scale, "n_cells": int(self.order.size),
             "blocks": int(self.matrix.shape[0])},
        )


# ---------- helpers ----------

def _check_distances(D, D_GT) -> Tuple[np.ndarray, np.ndarray]:
    D = _as_matrix(D, "D")
    G = _as_matrix(D_GT, "D_GT")
    if D.shape != G.shape or D.shape[0] != D.shape[1]:
        raise InvalidArgumentError(f"distance matrices must be square and equal in shape, got {D.shape}, {G.shape}")
    if D.shape[0] < 3:
        raise InvalidArgumentError("metrics need at least 3 points")
    for name, M in (("D", D), ("D_GT", G)):
        scale = max(1.0, float(np.max(np.abs(M))))
        if np.max(np.abs(M - M.T)) > SYMMETRY_TOL * scale:
            raise InvalidInputError(f"{name} is not symmetric")
        if np.any(np.abs(np.diag(M)) > SYMMETRY_TOL * scale):
            raise InvalidInputError(f"{name} has a nonzero diagonal")
    return D, G


def _upper(M: np.ndarray) -> np.ndarray:
    return M[np.triu_indices(M.shape[0], k=1)]


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    denom = math.sqrt(float(np.sum(a * a)) * float(np.sum(b * b)))
    if denom == 0:
        return math.nan
    return float(np.clip(np.sum(a * b) / denom, -1.0, 1.0))


def _ranks(M: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Stable per-row neighbor order and the matching 1-based rank matrix."""
    order = neighbor_order(M)
    n = M.shape[0]
    ranks = np.zeros((n, n), dtype=np.int64)
    rows = np.repeat(np.arange(n), n - 1)
    ranks[rows, order.ravel()] = np.tile(np.arange(1, n), n)
    return order, ranks


def _check_k(k: int, n: int) -> None:
    if not 1 <= k < n:
        raise InvalidArgumentError(f"k={k} must lie in [1, {n - 1}]")


# ---------- global geometry ----------

def global_distance_metrics(D, D_GT) -> Tuple[float, float, float]:
    """(spearman, pearson, stress1) on the upper triangles; undefined values are NaN."""
    D, G = _check_distances(D, D_GT)
    d, g = _upper(D), _upper(G)
    pearson = _pearson(d, g)
    spearman = _pearson(rankdata(d), rankdata(g))
    denom = float(np.sum(g**2))
    stress1 = math.sqrt(float(np.sum((d - g) ** 2)) / denom) if denom > 0 else math.nan
    return spearman, pearson, stress1


def scale_error(D, D_GT) -> float:
    """|log s*| for the least-squares global scale s* = <D, D_GT> / <D, D> over the upper triangles."""
    D, G = _check_distances(D, D_GT)
    d, g = _upper(D), _upper(G)
    dd, dg = float(np.dot(d, d)), float(np.dot(d, g))
    if dd == 0 or dg <= 0:
        return math.nan
    return abs(math.log(dg / dd))


def local_stress(D, D_GT, k: int) -> float:
    """Stress-1 over the pairs where either end is among the other's k nearest GT neighbors."""
    D, G = _check_distances(D, D_GT)
    n = G.shape[0]
    _check_k(k, n)
    order = neighbor_order(G)[:, :k]
    rows = np.repeat(np.arange(n), k)
    cols = order.ravel()
    i, j = np.minimum(rows, cols), np.maximum(rows, cols)
    pairs = np.unique(i * n + j)
    i, j = pairs // n, pairs % n
    d, g = D[i, j], G[i, j]
    denom = float(np.sum(g**2))
    return math.sqrt(float(np.sum((d - g) ** 2)) / denom) if denom > 0 else math.nan


def neighborhood_radius(D_GT, k: int) -> float:
    G = _as_matrix(D_GT, "D_GT")
    _check_k(k, G.shape[0])
    order = neighbor_order(G)
    return float(np.median(G[np.arange(G.shape[0]), order[:, k - 1]]))


# ---------- local geometry ----------

def edge_classification_metrics(D, D_GT, R: float) -> Tuple[float, float]:
    """ROC-AUC and class-balanced AP of near pairs (GT distance <= R) scored by -D."""
    D, G = _check_distances(D, D_GT)
    d, g = _upper(D), _upper(G)
    pos = g <= R
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        return math.nan, math.nan
    score = -d
    ranks = rankdata(score)
    auc = (float(ranks[pos].sum()) - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
    weights = np.where(pos, 1.0 / n_pos, 1.0 / n_neg)
    bap = float(average_precision_score(pos.astype(int), score, sample_weight=weights))
    return auc, bap


def shell_radii(D_GT, R: float, n_shells: int, mode: str = "radius") -> np.ndarray:
    """r_0 = 0 < r_1 < ... < r_S, as multiples of R or as GT distance quantiles."""
    if mode == "radius":
        return R * np.arange(n_shells + 1, dtype=float)
    if mode == "quantile":
        g = _upper(_as_matrix(D_GT, "D_GT"))
        radii = np.quantile(g, np.arange(n_shells + 1) / n_shells)
        radii[0] = 0.0
        return radii
    raise InvalidArgumentError(f"unknown shell mode {mode!r}")


def shell_f1(D, D_GT, R: float, n_shells: int, mode: str = "radius") -> float:
    """Macro F1 over GT-defined shells; a shell empty in both GT and prediction scores 1."""
    D, G = _check_distances(D, D_GT)
    if n_shells < 1:
        raise InvalidArgumentError("need at least one shell")
    d, g = _upper(D), _upper(G)
    radii = shell_radii(G, R, n_shells, mode)
    scores = []
    for s in range(1, n_shells + 1):
        truth = (g > radii[s - 1]) & (g <= radii[s])
        pred = (d > radii[s - 1]) & (d <= radii[s])
        tp = int(np.sum(truth & pred))
        fp = int(np.sum(~truth & pred))
        fn = int(np.sum(truth & ~pred))
        if tp + fp + fn == 0:
            scores.append(1.0)
        else:
            scores.append(2.0 * tp / (2.0 * tp + fp + fn))
    return float(np.mean(scores))


# ---------- neighborhood quality ----------

def rank_metrics(D, D_GT, k: int) -> Tuple[float, float]:
    """(Trust@k, Cont@k) with ranks from stable sorts, ties by index."""
    D, G = _check_distances(D, D_GT)
    n = D.shape[0]
    _check_k(k, n)
    if 2 * n - 3 * k - 1 <= 0:
        raise InvalidArgumentError(f"trust/continuity need 2N - 3k - 1 > 0 (N={n}, k={k})")
    order_gt, rank_gt = _ranks(G)
    order_pred, rank_pred = _ranks(D)
    rows = np.arange(n)[:, None]
    trust_pen = np.maximum(rank_gt[rows, order_pred[:, :k]] - k, 0).sum()
    cont_pen = np.maximum(rank_pred[rows, order_gt[:, :k]] - k, 0).sum()
    norm = 2.0 / (n * k * (2 * n - 3 * k - 1))
    return 1.0 - norm * float(trust_pen), 1.0 - norm * float(cont_pen)


# ---------- distributions ----------

def canonicalize(X) -> np.ndarray:
    """Centered and scaled to unit RMS radius."""
    P = center(X)
    rms = math.sqrt(float(np.mean(np.sum(P**2, axis=1))))
    return P / rms if rms > 0 else P


def projection_angles(n_projections: int, random: bool = False, seed: int = 42) -> np.ndarray:
    if random:
        return np.random.default_rng(seed).uniform(0.0, 2.0 * math.pi, size=n_projections)
    return math.pi * np.arange(n_projections) / n_projections


def sliced_wasserstein(X, X_GT, angles: np.ndarray) -> float:
    A = canonicalize(X)
    B = canonicalize(X_GT)
    if A.shape != B.shape:
        raise InvalidArgumentError(f"point sets differ in shape: {A.shape} vs {B.shape}")
    U = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    pa, pb = A @ U.T, B @ U.T
    return float(np.mean([wasserstein_distance(pa[:, l], pb[:, l]) for l in range(U.shape[0])]))


def distribution_metrics(X, X_GT, D, D_GT, cfg: MetricsConfig = MetricsConfig()) -> Tuple[float, float]:
    """(SWD on canonicalized coordinates, W1 between pooled kNN-distance samples)."""
    X = _as_matrix(X, "X")
    X_GT = _as_matrix(X_GT, "X_GT")
    if X.shape[0] != X_GT.shape[0]:
        raise InvalidArgumentError(f"{X.shape[0]} predicted points for {X_GT.shape[0]} GT points")
    D, G = _check_distances(D, D_GT)
    n = D.shape[0]
    _check_k(cfg.k, n)
    angles = projection_angles(cfg.n_projections, cfg.random_projections, cfg.seed)
    swd = sliced_wasserstein(X, X_GT, angles)
    rows = np.arange(n)[:, None]
    s_gt = G[rows, neighbor_order(G)[:, : cfg.k]].ravel()
    s_pred = D[rows, neighbor_order(D)[:, : cfg.k]].ravel()
    return swd, float(wasserstein_distance(s_gt, s_pred))


def calibration_metrics(D, D_GT, ks: Sequence[int], k: int = 20) -> Tuple[float, Dict[int, float]]:
    """CalErr at k and LRMSE for every k in ks, all on GT neighbor identities."""
    D, G = _check_distances(D, D_GT)
    n = D.shape[0]
    for kk in list(ks) + [k]:
        _check_k(kk, n)
    order = neighbor_order(G)
    rows = np.arange(n)

    r = G[rows, order[:, k - 1]]
    r_hat = D[rows, order[:, k - 1]]
    if np.any(r <= 0):
        logger.warning("calibration error undefined: zero GT {}-NN radius", k)
        cal_err = math.nan
    else:
        cal_err = float(np.mean(np.abs(r_hat / r - 1.0)))

    lrmse: Dict[int, float] = {}
    for kk in ks:
        R_k = float(np.median(G[rows, order[:, kk - 1]]))
        if R_k <= 0:
            logger.warning("LRMSE({}) undefined: zero GT radius", kk)
            lrmse[kk] = math.nan
            continue
        nb = order[:, :kk]
        err = (D[rows[:, None], nb] - G[rows[:, None], nb]) / R_k
        lrmse[kk] = math.sqrt(float(np.mean(err**2)))
    return cal_err, lrmse


# ---------- distortion map ----------

def morton_codes(coords, bits: int = MORTON_BITS) -> np.ndarray:
    """Z-order codes of coordinates quantized to `bits` per axis; x takes the even bits."""
    P = _as_matrix(coords, "coords")
    if P.shape[1] != 2:
        raise InvalidArgumentError("Morton codes need planar coordinates")
    if not 1 <= bits <= 31:
        raise InvalidArgumentError(f"bits={bits} must lie in [1, 31]")
    lo = P.min(axis=0)
    span = P.max(axis=0) - lo
    span[span == 0] = 1.0
    q = np.rint((P - lo) / span * (2**bits - 1)).astype(np.uint64)
    code = np.zeros(P.shape[0], dtype=np.uint64)
    for b in range(bits):
        one = np.uint64(1)
        code |= ((q[:, 0] >> np.uint64(b)) & one) << np.uint64(2 * b)
        code |= ((q[:, 1] >> np.uint64(b)) & one) << np.uint64(2 * b + 1)
    return code


def _block_mean(M: np.ndarray, block: int) -> np.ndarray:
    starts = np.arange(0, M.shape[0], block)
    sizes = np.diff(np.append(starts, M.shape[0]))
    sums = np.add.reduceat(np.add.reduceat(M, starts, axis=0), starts, axis=1)
    return sums / np.outer(sizes, sizes)


def distortion_map(X, X_GT, block: Optional[int] = None, epsilon: Optional[float] = None) -> DistortionMap:
    """
    E_ij = |log((s D_hat + eps) / (D + eps))| with s the least-squares global scale,
    rows and columns in Morton order of the GT coordinates, averaged over blocks.
    """
    P = _as_matrix(X, "X")
    Q = _as_matrix(X_GT, "X_GT")
    if P.shape[0] != Q.shape[0]:
        raise InvalidArgumentError(f"{P.shape[0]} predicted points for {Q.shape[0]} GT points")
    n = P.shape[0]
    D_hat = pairwise_distances(P)
    D = pairwise_distances(Q)
    if block is None:
        block = max(1, math.ceil(n / DISTORTION_BLOCKS))
    if block < 1:
        raise InvalidArgumentError("block size must be at least 1")
    if epsilon is None:
        epsilon = 1e-8 * float(np.median(_upper(D))) if n > 1 else 1e-8
    denom = float(np.sum(D_hat**2))
    scale = float(np.sum(D_hat * D)) / denom if denom > 0 else 1.0
    order = np.argsort(morton_codes(Q), kind="stable")
    E = np.abs(np.log((scale * D_hat + epsilon) / (D + epsilon)))
    E = E[np.ix_(order, order)]
    return DistortionMap(matrix=_block_mean(E, block), block=block, epsilon=epsilon, scale=scale, order=order)


# ---------- full report ----------

def match_tables(
    pred: Union[CoordinateTable, DistanceTable], gt: CoordinateTable
) -> Union[CoordinateTable, DistanceTable]:
    """The prediction reordered to the GT id order; the id sets must coincide."""
    ps, gs = set(pred.ids), set(gt.ids)
    if ps != gs:
        raise IdMismatchError(missing_in_pred=gs - ps, missing_in_gt=ps - gs)
    return pred.reindex(gt.ids)


def coordinates_from_distances(D, d: int = 2) -> np.ndarray:
    """Classical MDS: the top-d canonical factor of the double-centered squared distances."""
    D = _as_matrix(D, "D")
    n = D.shape[0]
    J = np.eye(n) - 1.0 / n
    return canonical_factor(-0.5 * J @ (D**2) @ J, min(d, n))


def evaluate(
    pred: Union[CoordinateTable, DistanceTable, np.ndarray],
    gt: Union[CoordinateTable, np.ndarray],
    cfg: MetricsConfig = MetricsConfig(),
) -> Tuple[MetricsReport, List[str]]:
    """
    The full report plus the names of metrics that came out undefined (NaN).
    A DistanceTable prediction is scored on its own distances; SWD uses its classical-MDS
    coordinates, which carry no pose of their own and are Procrustes-aligned to the GT first.
    """
    if isinstance(pred, (CoordinateTable, DistanceTable)) and isinstance(gt, CoordinateTable):
        matched, X_GT = match_tables(pred, gt), gt.coords
        if isinstance(matched, DistanceTable):
            D = np.array(matched.matrix)
            _, X = procrustes_align(coordinates_from_distances(D, X_GT.shape[1]), X_GT)
        else:
            X = matched.coords
            D = pairwise_distances(X)
    else:
        X, X_GT = _as_matrix(pred, "pred"), _as_matrix(gt, "gt")
        if X.shape[0] != X_GT.shape[0]:
            raise InvalidArgumentError(f"{X.shape[0]} predicted points for {X_GT.shape[0]} GT points")
        D = pairwise_distances(X)
    G = pairwise_distances(X_GT)
    n = D.shape[0]
    nan = math.nan
    values: Dict[str, float] = {}

    values["spearman"], values["pearson"], values["stress1"] = global_distance_metrics(D, G)
    values["scale_err"] = scale_error(D, G)
    try:
        values["local_stress"] = local_stress(D, G, cfg.k)
        R = neighborhood_radius(G, cfg.k)
        values["edge_roc_auc"], values["bap"] = edge_classification_metrics(D, G, R)
        values["shell_f1_macro"] = shell_f1(D, G, R, cfg.n_shells, cfg.shell_mode)
        values["swd"], values["w1_knn"] = distribution_metrics(X, X_GT, D, G, cfg)
    except InvalidArgumentError as e:
        logger.warning("local metrics undefined: {}", e)
        for name in ("local_stress", "edge_roc_auc", "bap", "shell_f1_macro", "swd", "w1_knn"):
            values.setdefault(name, nan)
    try:
        values["trust_at_k"], values["cont_at_k"] = rank_metrics(D, G, cfg.k)
    except InvalidArgumentError as e:
        logger.warning("trust/continuity undefined: {}", e)
        values["trust_at_k"] = values["cont_at_k"] = nan

    usable = [kk for kk in cfg.lrmse_ks if kk < n]
    lrmse: Dict[str, float] = {str(kk): nan for kk in cfg.lrmse_ks}
    try:
        values["cal_err"], by_k = calibration_metrics(D, G, usable, cfg.k)
        lrmse.update({str(kk): v for kk, v in by_k.items()})
    except InvalidArgumentError as e:
        logger.warning("calibration metrics undefined: {}", e)
        values["cal_err"] = nan

    report = MetricsReport(lrmse=lrmse, **values)
    undefined = [name for name, v in values.items() if math.isnan(v)]
    undefined += [f"lrmse@{kk}" for kk, v in lrmse.items() if math.isnan(v)]
    if undefined:
        logger.warning("undefined metrics: {}", ", ".join(undefined))
    return report, undefined
