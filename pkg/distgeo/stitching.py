"""
Stitching of per-patch geometries into one global distance graph: within-patch kNN
distance measurements, patch reliabilities from log-distance disagreement on overlaps,
and a reliability-weighted median per cell pair with support and spread filters.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field
from scipy.spatial.distance import pdist

from .errors import CsvFormatError, InvalidArgumentError, InvalidInputError
from .geometry import _as_matrix, knn_indices
from .patches import PatchCover, shared_counts

Weighting = Literal["weighted", "uniform"]
# relative tolerance on the cumulative-weight crossing
_HALF_TOL = 1e-12


class StitchConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    knn_extract: int = Field(20, ge=1)
    min_support: int = Field(2, ge=1)
    tau_spread: float = Field(0.5, gt=0)
    min_overlap_cells: int = Field(5, ge=2)


@dataclass(frozen=True)
class DistanceMeasurementSet:
    i: np.ndarray
    j: np.ndarray
    d_hat: np.ndarray
    patch: np.ndarray

    def __post_init__(self) -> None:
        i = np.asarray(self.i, dtype=int)
        j = np.asarray(self.j, dtype=int)
        d = np.asarray(self.d_hat, dtype=float)
        p = np.asarray(self.patch, dtype=int)
        if not (i.shape == j.shape == d.shape == p.shape):
            raise InvalidInputError("measurement columns must have equal length")
        if np.any(i >= j):
            raise InvalidInputError("measurements must be normalized with i < j")
        if np.any(~np.isfinite(d)) or np.any(d <= 0):
            raise InvalidInputError("measured distances must be positive and finite")
        for name, arr in (("i", i), ("j", j), ("d_hat", d), ("patch", p)):
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return int(self.i.size)

    @classmethod
    def empty(cls) -> "DistanceMeasurementSet":
        z = np.empty(0)
        return cls(i=z.astype(int), j=z.astype(int), d_hat=z, patch=z.astype(int))

    @classmethod
    def concat(cls, parts: Sequence["DistanceMeasurementSet"]) -> "DistanceMeasurementSet":
        if not parts:
            return cls.empty()
        return cls(
            i=np.concatenate([m.i for m in parts]),
            j=np.concatenate([m.j for m in parts]),
            d_hat=np.concatenate([m.d_hat for m in parts]),
            patch=np.concatenate([m.patch for m in parts]),
        )

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"i": self.i, "j": self.j, "d_hat": self.d_hat, "patch": self.patch})


@dataclass(frozen=True)
class PatchReliability:
    weights: np.ndarray
    disagreement: np.ndarray

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=float)
        if np.any(w <= 0) or np.any(w > 1):
            raise InvalidInputError("patch reliabilities must lie in (0, 1]")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "disagreement", np.asarray(self.disagreement, dtype=float))

    def __len__(self) -> int:
        return int(self.weights.size)


@dataclass(frozen=True)
class StitchedGraph:
    n_nodes: int
    i: np.ndarray
    j: np.ndarray
    d: np.ndarray
    omega: np.ndarray
    count: np.ndarray
    spread: np.ndarray

    def __post_init__(self) -> None:
        cols = {
            "i": np.asarray(self.i, dtype=int),
            "j": np.asarray(self.j, dtype=int),
            "d": np.asarray(self.d, dtype=float),
            "omega": np.asarray(self.omega, dtype=float),
            "count": np.asarray(self.count, dtype=int),
            "spread": np.asarray(self.spread, dtype=float),
        }
        if len({a.shape for a in cols.values()}) != 1:
            raise InvalidInputError("edge columns must have equal length")
        if np.any(cols["i"] >= cols["j"]) or np.any(cols["i"] < 0) or np.any(cols["j"] >= self.n_nodes):
            raise InvalidInputError("edges must satisfy 0 <= i < j < n_nodes")
        if np.any(~(cols["d"] > 0)) or np.any(~np.isfinite(cols["d"])):
            raise InvalidInputError("edge distances must be positive and finite")
        if np.any(~(cols["omega"] > 0)):
            raise InvalidInputError("edge weights must be positive")
        pairs = cols["i"].astype(np.int64) * self.n_nodes + cols["j"]
        if np.unique(pairs).size != pairs.size:
            raise InvalidInputError("duplicate edge in stitched graph")
        for name, arr in cols.items():
            object.__setattr__(self, name, arr)

    @property
    def n_edges(self) -> int:
        return int(self.i.size)

    def scaled(self, factor: float) -> "StitchedGraph":
        if factor <= 0:
            raise InvalidArgumentError("scale factor must be positive")
        return StitchedGraph(self.n_nodes, self.i, self.j, self.d * factor, self.omega, self.count, self.spread)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {"i": self.i, "j": self.j, "d": self.d, "omega": self.omega, "count": self.count, "spread": self.spread}
        )

    def to_csv(self, path: Union[str, Path]) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g")

    @classmethod
    def read_csv(cls, path: Union[str, Path], n_nodes: int) -> "StitchedGraph":
        path = str(path)
        try:
            frame = pd.read_csv(path, float_precision="round_trip")
        except (pd.errors.ParserError, pd.errors.EmptyDataError, OSError) as e:
            raise CsvFormatError(path, f"unreadable CSV ({e})") from e
        expected = ["i", "j", "d", "omega", "count", "spread"]
        if list(frame.columns) != expected:
            raise CsvFormatError(path, f"expected header {','.join(expected)}", line=1)
        try:
            return cls(n_nodes=n_nodes, **{c: frame[c].to_numpy() for c in expected})
        except (InvalidInputError, ValueError) as e:
            raise CsvFormatError(path, str(e)) from e


@dataclass(frozen=True)
class StitchResult:
    measurements: DistanceMeasurementSet
    disagreements: Dict[Tuple[int, int], float]
    reliability: PatchReliability
    graph: StitchedGraph


# ---------- measurements ----------

def extract_patch_edges(V_pred_p, patch_ids, k: int, patch: int = 0) -> DistanceMeasurementSet:
    """Within-patch kNN edges (by the patch geometry) as global-id distance records."""
    V = _as_matrix(V_pred_p, "patch geometry")
    ids = np.asarray(patch_ids, dtype=int)
    n = ids.size
    if V.shape[0] != n:
        raise InvalidArgumentError(f"{V.shape[0]} geometry rows for {n} patch ids")
    if not 1 <= k < n:
        raise InvalidArgumentError(f"k={k} must lie in [1, {n - 1}] for a patch of {n} cells")
    nn = knn_indices(V, k)
    a = np.repeat(np.arange(n), k)
    b = nn.ravel()
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    local = np.unique(np.stack([lo, hi], axis=1), axis=0)
    d = np.linalg.norm(V[local[:, 0]] - V[local[:, 1]], axis=1)
    positive = d > 0
    if not positive.all():
        logger.warning("patch {}: dropped {} zero-distance measurements", patch, int((~positive).sum()))
    local, d = local[positive], d[positive]
    gi, gj = ids[local[:, 0]], ids[local[:, 1]]
    return DistanceMeasurementSet(
        i=np.minimum(gi, gj), j=np.maximum(gi, gj), d_hat=d, patch=np.full(d.size, patch, dtype=int)
    )


# ---------- reliability ----------

def overlap_disagreement(Vp, Vq, shared_p, shared_q, min_cells: int = 5) -> Optional[float]:
    """
    Mean |log d_p - log d_q| over shared pairs. `shared_p` and `shared_q` are the local
    rows of the same cells in each patch. Returns None when the overlap is too small.
    """
    sp = np.asarray(shared_p, dtype=int)
    sq = np.asarray(shared_q, dtype=int)
    if sp.size != sq.size:
        raise InvalidArgumentError("shared index lists must have equal length")
    if sp.size < min_cells:
        return None
    dp = pdist(_as_matrix(Vp, "Vp")[sp])
    dq = pdist(_as_matrix(Vq, "Vq")[sq])
    ok = (dp > 0) & (dq > 0)
    if not ok.any():
        return None
    return float(np.mean(np.abs(np.log(dp[ok]) - np.log(dq[ok]))))


def patch_reliabilities(disagreements: Dict[Tuple[int, int], float], n_patches: int) -> PatchReliability:
    """
    a_p = exp(-m_p / median) with m_p the mean disagreement of p with its partners and the
    median taken over patches that have partners. Patches without partners get 1.
    """
    sums = np.zeros(n_patches)
    counts = np.zeros(n_patches, dtype=int)
    for (p, q), value in disagreements.items():
        for r in (p, q):
            sums[r] += value
            counts[r] += 1
    has = counts > 0
    m = np.zeros(n_patches)
    m[has] = sums[has] / counts[has]
    weights = np.ones(n_patches)
    if has.any():
        scale = float(np.median(m[has]))
        if scale <= 0:
            positive = m[has][m[has] > 0]
            scale = float(positive.mean()) if positive.size else 1.0
        weights[has] = np.exp(-m[has] / scale)
    weights = np.clip(weights, np.finfo(float).tiny, 1.0)
    return PatchReliability(weights=weights, disagreement=m)


def uniform_reliabilities(n_patches: int) -> PatchReliability:
    return PatchReliability(weights=np.ones(n_patches), disagreement=np.zeros(n_patches))


# ---------- aggregation ----------

def weighted_median(values, weights) -> float:
    """Lower weighted median: smallest value whose cumulative weight reaches half the total."""
    v = np.asarray(values, dtype=float)
    w = np.asarray(weights, dtype=float)
    if v.size == 0 or v.shape != w.shape:
        raise InvalidArgumentError("weighted median needs equally many values and weights")
    if np.any(w <= 0):
        raise InvalidArgumentError("weights must be positive")
    order = np.argsort(v, kind="stable")
    cum = np.cumsum(w[order])
    hit = np.flatnonzero(cum >= 0.5 * cum[-1] * (1 - _HALF_TOL))[0]
    return float(v[order][hit])


def relative_spread(values) -> float:
    """Interquartile range over median, quartiles by linear interpolation."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise InvalidArgumentError("spread of an empty sample")
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return float((q3 - q1) / med)


def _group_quantile(v: np.ndarray, starts: np.ndarray, counts: np.ndarray, q: float) -> np.ndarray:
    h = (counts - 1) * q
    lo = np.floor(h).astype(int)
    frac = h - lo
    hi = np.minimum(lo + 1, counts - 1)
    return v[starts + lo] + frac * (v[starts + hi] - v[starts + lo])


def aggregate_edges(
    measurements: DistanceMeasurementSet, rel: PatchReliability, cfg: StitchConfig = StitchConfig(), n_nodes: Optional[int] = None
) -> StitchedGraph:
    if n_nodes is None:
        n_nodes = int(measurements.j.max()) + 1 if len(measurements) else 0
    if len(measurements) == 0:
        z = np.empty(0)
        return StitchedGraph(n_nodes, z.astype(int), z.astype(int), z, z, z.astype(int), z)

    order = np.lexsort((measurements.patch, measurements.d_hat, measurements.j, measurements.i))
    i = measurements.i[order]
    j = measurements.j[order]
    d = measurements.d_hat[order]
    w = rel.weights[measurements.patch[order]]

    new_group = np.ones(i.size, dtype=bool)
    new_group[1:] = (i[1:] != i[:-1]) | (j[1:] != j[:-1])
    starts = np.flatnonzero(new_group)
    counts = np.diff(np.append(starts, i.size))
    group = np.repeat(np.arange(starts.size), counts)

    # weighted median per pair, values already sorted within each group
    cum = np.cumsum(w)
    offset = (cum[starts] - w[starts])[group]
    total = np.add.reduceat(w, starts)[group]
    hit = (cum - offset) >= 0.5 * total * (1 - _HALF_TOL)
    pos = np.where(hit, np.arange(i.size), i.size)
    med = d[np.minimum.reduceat(pos, starts)]

    q1 = _group_quantile(d, starts, counts, 0.25)
    q2 = _group_quantile(d, starts, counts, 0.50)
    q3 = _group_quantile(d, starts, counts, 0.75)
    spread = (q3 - q1) / q2

    keep = (counts >= cfg.min_support) & (spread <= cfg.tau_spread)
    logger.info(
        "aggregated {} pairs: {} kept, {} below support, {} over spread",
        starts.size, int(keep.sum()), int((counts < cfg.min_support).sum()),
        int(((counts >= cfg.min_support) & (spread > cfg.tau_spread)).sum()),
    )
    s = starts[keep]
    return StitchedGraph(
        n_nodes=n_nodes,
        i=i[s],
        j=j[s],
        d=med[keep],
        omega=np.sqrt(counts[keep]) / (1.0 + spread[keep]),
        count=counts[keep],
        spread=spread[keep],
    )


# ---------- end to end ----------

def overlapping_pairs(cover: PatchCover, min_cells: int) -> List[Tuple[int, int, int]]:
    """(p, q, shared) for every patch pair with at least min_cells shared cells, p < q."""
    if len(cover) < 2:
        return []
    S = shared_counts(cover.patches, cover.n_cells)
    return sorted((int(p), int(q), int(c)) for p, q, c in zip(S.row, S.col, S.data) if c >= min_cells)


def stitch(
    geometries: Sequence[np.ndarray],
    cover: PatchCover,
    cfg: StitchConfig = StitchConfig(),
    weighting: Weighting = "weighted",
) -> StitchResult:
    if len(geometries) != len(cover):
        raise InvalidArgumentError(f"{len(geometries)} geometries for {len(cover)} patches")
    if len(cover) < cfg.min_support:
        # no edge can be seen by more patches than there are
        logger.warning("min_support={} exceeds the {} patches; using {}", cfg.min_support, len(cover), len(cover))
        cfg = cfg.model_copy(update={"min_support": len(cover)})

    parts = []
    for p, (V, ids) in enumerate(zip(geometries, cover.patches)):
        k = min(cfg.knn_extract, ids.size - 1)
        if k < 1:
            continue
        parts.append(extract_patch_edges(V, ids, k, patch=p))
    measurements = DistanceMeasurementSet.concat(parts)

    disagreements: Dict[Tuple[int, int], float] = {}
    skipped = 0
    for p, q, _ in overlapping_pairs(cover, 1):
        _, lp, lq = np.intersect1d(cover.patches[p], cover.patches[q], assume_unique=True, return_indices=True)
        value = overlap_disagreement(geometries[p], geometries[q], lp, lq, cfg.min_overlap_cells)
        if value is None:
            skipped += 1
            continue
        disagreements[(p, q)] = value
    if skipped:
        logger.debug("skipped {} patch pairs with fewer than {} shared cells", skipped, cfg.min_overlap_cells)

    if weighting == "uniform":
        rel = uniform_reliabilities(len(cover))
    elif weighting == "weighted":
        rel = patch_reliabilities(disagreements, len(cover))
    else:
        raise InvalidArgumentError(f"unknown weighting {weighting!r}")

    graph = aggregate_edges(measurements, rel, cfg, n_nodes=cover.n_cells)
    return StitchResult(measurements=measurements, disagreements=disagreements, reliability=rel, graph=graph)
