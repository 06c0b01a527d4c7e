"""
Pose-invariant geometric primitives: centering, Gram matrices, canonical
factorization, orthogonal Procrustes alignment and pairwise distances.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import linalg
from scipy.spatial.distance import cdist, pdist, squareform

from .errors import CsvFormatError, InvalidArgumentError, InvalidInputError

# eigenvalues below this fraction of the trace count as zero
RANK_TOL = 1e-10
SYMMETRY_TOL = 1e-9
KNN_BLOCK = 512


def _as_matrix(values, name: str = "input") -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise InvalidInputError(f"{name} must be a 2D matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return arr


# ---------- coordinate tables ----------

@dataclass(frozen=True)
class CoordinateTable:
    ids: Tuple[str, ...]
    coords: np.ndarray

    def __post_init__(self) -> None:
        coords = _as_matrix(self.coords, "coords")
        ids = tuple(str(i) for i in self.ids)
        if len(ids) < 1:
            raise InvalidInputError("a coordinate table needs at least one row")
        if len(ids) != coords.shape[0]:
            raise InvalidInputError(f"{len(ids)} ids for {coords.shape[0]} coordinate rows")
        if len(set(ids)) != len(ids):
            raise InvalidInputError("coordinate ids must be unique")
        coords.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "coords", coords)

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_array(cls, coords, prefix: str = "c") -> "CoordinateTable":
        coords = np.asarray(coords, dtype=float)
        return cls(ids=tuple(f"{prefix}{i}" for i in range(coords.shape[0])), coords=coords)

    def subset(self, indices: Sequence[int]) -> "CoordinateTable":
        idx = np.asarray(indices, dtype=int)
        return CoordinateTable(ids=tuple(self.ids[i] for i in idx), coords=self.coords[idx])

    def reindex(self, ids: Sequence[str]) -> "CoordinateTable":
        pos = {cid: i for i, cid in enumerate(self.ids)}
        return self.subset([pos[i] for i in ids])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"id": list(self.ids), "x": self.coords[:, 0], "y": self.coords[:, 1]})

    def to_csv(self, path: Union[str, Path]) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g")

    @classmethod
    def read_csv(cls, path: Union[str, Path]) -> "CoordinateTable":
        """Reads an `id,x,y` table; malformed rows are reported with their 1-based line number."""
        path = str(path)
        try:
            frame = pd.read_csv(path, dtype={"id": str}, float_precision="round_trip")
        except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
            raise CsvFormatError(path, f"unreadable CSV ({e})") from e
        except OSError as e:
            raise CsvFormatError(path, f"cannot open ({e})") from e
        if list(frame.columns) != ["id", "x", "y"]:
            raise CsvFormatError(path, f"expected header id,x,y, got {','.join(map(str, frame.columns))}", line=1)
        numeric = frame[["x", "y"]].apply(pd.to_numeric, errors="coerce")
        bad = ~np.isfinite(numeric.to_numpy(dtype=float)).all(axis=1) | frame["id"].isna().to_numpy()
        if bad.any():
            first = int(np.flatnonzero(bad)[0])
            raise CsvFormatError(path, "missing or non-numeric value", line=first + 2)
        dup = frame["id"].duplicated().to_numpy()
        if dup.any():
            first = int(np.flatnonzero(dup)[0])
            raise CsvFormatError(path, f"duplicate id {frame['id'].iloc[first]!r}", line=first + 2)
        return cls(ids=tuple(frame["id"]), coords=numeric.to_numpy(dtype=float))


@dataclass(frozen=True)
class DistanceTable:
    """A labeled square distance matrix; CSV layout is `id,<id_1>,...,<id_n>` then one row per id."""

    ids: Tuple[str, ...]
    matrix: np.ndarray

    def __post_init__(self) -> None:
        M = _as_matrix(self.matrix, "distance matrix")
        ids = tuple(str(i) for i in self.ids)
        if M.shape != (len(ids), len(ids)):
            raise InvalidInputError(f"{len(ids)} ids for a distance matrix of shape {M.shape}")
        if len(set(ids)) != len(ids):
            raise InvalidInputError("distance matrix ids must be unique")
        M.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "matrix", M)

    def __len__(self) -> int:
        return len(self.ids)

    def reindex(self, ids: Sequence[str]) -> "DistanceTable":
        pos = {cid: i for i, cid in enumerate(self.ids)}
        idx = np.asarray([pos[i] for i in ids], dtype=int)
        return DistanceTable(ids=tuple(ids), matrix=self.matrix[np.ix_(idx, idx)])

    def to_csv(self, path: Union[str, Path]) -> None:
        frame = pd.DataFrame(self.matrix, columns=list(self.ids))
        frame.insert(0, "id", list(self.ids))
        frame.to_csv(path, index=False, float_format="%.17g")

    @classmethod
    def read_csv(cls, path: Union[str, Path]) -> "DistanceTable":
        path = str(path)
        try:
            frame = pd.read_csv(path, dtype={"id": str}, float_precision="round_trip")
        except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
            raise CsvFormatError(path, f"unreadable CSV ({e})") from e
        except OSError as e:
            raise CsvFormatError(path, f"cannot open ({e})") from e
        if frame.columns[0] != "id" or [str(c) for c in frame.columns[1:]] != frame["id"].tolist():
            raise CsvFormatError(path, "expected header id,<ids in row order>", line=1)
        values = frame.iloc[:, 1:].apply(pd.to_numeric, errors="coerce").to_numpy(dtype=float)
        bad = ~np.isfinite(values).all(axis=1)
        if bad.any():
            raise CsvFormatError(path, "missing or non-numeric value", line=int(np.flatnonzero(bad)[0]) + 2)
        return cls(ids=tuple(frame["id"]), matrix=values)


# ---------- primitives ----------

def center(coords) -> np.ndarray:
    P = _as_matrix(coords, "coords")
    return P - P.mean(axis=0, keepdims=True)


def gram(Y) -> np.ndarray:
    Y = _as_matrix(Y, "Y")
    G = Y @ Y.T
    # exact symmetry; the product is symmetric only up to rounding
    return 0.5 * (G + G.T)


def canonical_factor(G, d: int) -> np.ndarray:
    """
    V = U[:, :d] sqrt(Lambda[:d]) with eigenvalues sorted non-increasing (ties by index),
    negative and below-tolerance eigenvalues clamped to zero and each eigenvector's first
    nonzero component made positive.
    """
    G = _as_matrix(G, "G")
    n = G.shape[0]
    if G.shape[1] != n:
        raise InvalidInputError(f"Gram matrix must be square, got {G.shape}")
    if d < 1 or d > n:
        raise InvalidArgumentError(f"factor dimension d={d} must lie in [1, {n}]")
    scale = max(1.0, float(np.max(np.abs(G))))
    if np.max(np.abs(G - G.T)) > SYMMETRY_TOL * scale:
        raise InvalidInputError("Gram matrix is not symmetric")

    evals, evecs = linalg.eigh(0.5 * (G + G.T))
    order = np.lexsort((np.arange(n), -evals))
    evals = evals[order][:d]
    evecs = evecs[:, order][:, :d]

    trace = max(float(np.trace(G)), 0.0)
    evals = np.where(evals > RANK_TOL * trace, evals, 0.0)

    for col in range(d):
        v = evecs[:, col]
        nz = np.flatnonzero(np.abs(v) > 1e-12)
        if nz.size and v[nz[0]] < 0:
            evecs[:, col] = -v
    return evecs * np.sqrt(evals)[None, :]


def procrustes_align(A, B) -> Tuple[np.ndarray, np.ndarray]:
    """
    Orthogonal Q in O(d) minimizing ||A Q - B||_F after centering both inputs.
    Returns (Q, A_centered @ Q). A zero cross-covariance fixes Q = I.
    """
    A = _as_matrix(A, "A")
    B = _as_matrix(B, "B")
    if A.shape != B.shape:
        raise InvalidArgumentError(f"shape mismatch: {A.shape} vs {B.shape}")
    A = A - A.mean(axis=0, keepdims=True)
    B = B - B.mean(axis=0, keepdims=True)
    M = A.T @ B
    if not np.any(M):
        Q = np.eye(A.shape[1])
    else:
        U, _, Vt = linalg.svd(M)
        Q = U @ Vt
    return Q, A @ Q


def procrustes_residual(A, B) -> float:
    _, aligned = procrustes_align(A, B)
    B = _as_matrix(B, "B")
    return float(np.linalg.norm(aligned - (B - B.mean(axis=0, keepdims=True))))


def pairwise_distances(V) -> np.ndarray:
    V = _as_matrix(V, "V")
    if V.shape[0] == 1:
        return np.zeros((1, 1))
    return squareform(pdist(V))


# ---------- neighborhoods ----------

def neighbor_order(D) -> np.ndarray:
    """Per row, all other indices sorted by distance; ties by index. Shape (n, n-1)."""
    D = np.array(D, dtype=float)
    np.fill_diagonal(D, np.inf)
    return np.argsort(D, axis=1, kind="stable")[:, :-1]


def knn_indices(points, k: int) -> np.ndarray:
    """Exact k nearest neighbors of every row (self excluded, ties by index), block-wise over rows."""
    X = _as_matrix(points, "points")
    n = X.shape[0]
    if k < 1 or k >= n:
        raise InvalidArgumentError(f"k={k} must lie in [1, {n - 1}]")
    out = np.empty((n, k), dtype=int)
    for start in range(0, n, KNN_BLOCK):
        stop = min(n, start + KNN_BLOCK)
        block = cdist(X[start:stop], X)
        block[np.arange(stop - start), np.arange(start, stop)] = np.inf
        out[start:stop] = np.argsort(block, axis=1, kind="stable")[:, :k]
    return out
