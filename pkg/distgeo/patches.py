"""
Embedding surrogate, mutual-kNN locality graph with Jaccard pruning, and random-walk
sampling of an overlapping, connected patch cover.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import sparse
from scipy.sparse.csgraph import connected_components, shortest_path
from scipy.spatial.distance import cdist
from sklearn.decomposition import PCA

from .errors import InvalidArgumentError, InvalidInputError
from .geometry import _as_matrix, knn_indices
from .store import dumps_json

RESTART_PROB = 0.1
_JACCARD_CHUNK = 4096


class GraphConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    k_z: int = Field(50, ge=1)
    tau_j: float = Field(0.2, ge=0, le=1)


class PatchConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    n_patch: int = Field(1024, ge=1)
    walks_per_cell: int = Field(10, ge=1)
    overlap_fraction: float = Field(0.7, gt=0, le=1)
    min_shared: int = Field(25, ge=1)
    min_multiplicity: int = Field(2, ge=1)
    seed: int = 42

    @model_validator(mode="after")
    def _check_overlap(self) -> "PatchConfig":
        if self.n_patch < self.min_shared:
            raise ValueError(f"n_patch={self.n_patch} cannot hold min_shared={self.min_shared} shared cells")
        return self


@dataclass(frozen=True)
class EmbeddingMatrix:
    ids: Tuple[str, ...]
    values: np.ndarray
    components: Optional[np.ndarray] = None
    mean: Optional[np.ndarray] = None
    explained_variance: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        values = _as_matrix(self.values, "embedding")
        ids = tuple(str(i) for i in self.ids)
        if len(ids) != values.shape[0]:
            raise InvalidInputError(f"{len(ids)} ids for {values.shape[0]} embedding rows")
        if len(set(ids)) != len(ids):
            raise InvalidInputError("embedding ids must be unique")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class LocalityGraph:
    """Undirected simple graph on n nodes; edges kept once as i < j, adjacency symmetric."""

    n: int
    i: np.ndarray
    j: np.ndarray
    jaccard: np.ndarray
    bridges: int = 0
    _adj: Any = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        i = np.asarray(self.i, dtype=int)
        j = np.asarray(self.j, dtype=int)
        if np.any(i >= j):
            raise InvalidInputError("locality edges must be stored with i < j")
        order = np.lexsort((j, i))
        object.__setattr__(self, "i", i[order])
        object.__setattr__(self, "j", j[order])
        object.__setattr__(self, "jaccard", np.asarray(self.jaccard, dtype=float)[order])
        ones = np.ones(i.size)
        A = sparse.coo_matrix((ones, (i[order], j[order])), shape=(self.n, self.n)).tocsr()
        object.__setattr__(self, "_adj", (A + A.T).tocsr())

    @property
    def n_edges(self) -> int:
        return int(self.i.size)

    def adjacency(self) -> sparse.csr_matrix:
        return self._adj

    def neighbors(self, node: int) -> np.ndarray:
        A = self._adj
        return np.sort(A.indices[A.indptr[node]:A.indptr[node + 1]])

    def degree(self) -> np.ndarray:
        return np.diff(self._adj.indptr)

    def edges(self) -> Iterator[Tuple[int, int, float]]:
        for a, b, s in zip(self.i, self.j, self.jaccard):
            yield int(a), int(b), float(s)

    def n_components(self) -> int:
        return int(connected_components(self._adj, directed=False)[0])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"i": self.i, "j": self.j, "jaccard": self.jaccard})

    def to_csv(self, path: Union[str, Path]) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g")


@dataclass(frozen=True)
class PatchCover:
    patches: Tuple[np.ndarray, ...]
    neighbors: Tuple[Tuple[int, int], ...]
    n_cells: int

    def __len__(self) -> int:
        return len(self.patches)

    def multiplicity(self) -> np.ndarray:
        m = np.zeros(self.n_cells, dtype=int)
        for p in self.patches:
            m[p] += 1
        return m

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n_cells": self.n_cells,
            "patches": [p.tolist() for p in self.patches],
            "neighbors": [list(pq) for pq in self.neighbors],
        }

    def to_json(self) -> bytes:
        return dumps_json(self.to_dict())

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PatchCover":
        return cls(
            patches=tuple(np.asarray(p, dtype=int) for p in data["patches"]),
            neighbors=tuple((int(p), int(q)) for p, q in data["neighbors"]),
            n_cells=int(data["n_cells"]),
        )


# ---------- embedding ----------

def normalize_expression(E) -> np.ndarray:
    """Scale every cell to the median library size, then log1p."""
    X = _as_matrix(E, "expression")
    if np.any(X < 0):
        raise InvalidInputError("expression levels must be non-negative")
    depth = X.sum(axis=1)
    positive = depth > 0
    if not positive.any():
        return np.zeros_like(X)
    target = float(np.median(depth[positive]))
    scale = np.where(positive, target / np.where(positive, depth, 1.0), 0.0)
    return np.log1p(X * scale[:, None])


def pca_embed(expression, h: int, ids: Optional[Sequence[str]] = None) -> EmbeddingMatrix:
    X = _as_matrix(expression, "expression")
    n, g = X.shape
    if n < 2:
        raise InvalidArgumentError("PCA needs at least 2 rows")
    if not 1 <= h <= min(n, g):
        raise InvalidArgumentError(f"h={h} must lie in [1, {min(n, g)}]")
    pca = PCA(n_components=h, svd_solver="full")
    values = pca.fit_transform(X)
    components = pca.components_.copy()
    # largest-magnitude loading positive
    lead = components[np.arange(h), np.argmax(np.abs(components), axis=1)]
    signs = np.where(lead < 0, -1.0, 1.0)
    components *= signs[:, None]
    values = values * signs[None, :]
    if ids is None:
        ids = [f"c{i}" for i in range(n)]
    return EmbeddingMatrix(
        ids=tuple(ids),
        values=values,
        components=components,
        mean=pca.mean_.copy(),
        explained_variance=pca.explained_variance_.copy(),
    )


# ---------- locality graph ----------

def jaccard(a, b) -> float:
    a, b = set(a), set(b)
    union = a | b
    if not union:
        raise InvalidArgumentError("Jaccard index of two empty sets is undefined")
    return len(a & b) / len(union)


def _closed_jaccard(knn: np.ndarray, i: np.ndarray, j: np.ndarray) -> np.ndarray:
    """Jaccard of the closed k-NN sets (each point counted in its own set), chunked over edges."""
    n = knn.shape[0]
    closed = np.hstack([np.arange(n)[:, None], knn])
    size = closed.shape[1]
    out = np.empty(i.size)
    for start in range(0, i.size, _JACCARD_CHUNK):
        a = closed[i[start:start + _JACCARD_CHUNK]]
        b = closed[j[start:start + _JACCARD_CHUNK]]
        inter = (a[:, :, None] == b[:, None, :]).any(axis=2).sum(axis=1)
        out[start:start + _JACCARD_CHUNK] = inter / (2 * size - inter)
    return out


def mutual_knn_graph(Z: EmbeddingMatrix, cfg: GraphConfig = GraphConfig()) -> LocalityGraph:
    n = len(Z)
    if n <= cfg.k_z:
        raise InvalidArgumentError(f"need more than k_z={cfg.k_z} cells, got {n}")
    knn = knn_indices(Z.values, cfg.k_z)
    rows = np.repeat(np.arange(n), cfg.k_z)
    K = sparse.coo_matrix((np.ones(rows.size), (rows, knn.ravel())), shape=(n, n)).tocsr()
    M = sparse.triu(K.multiply(K.T), k=1).tocoo()
    i, j = M.row.astype(int), M.col.astype(int)
    scores = _closed_jaccard(knn, i, j)
    keep = scores >= cfg.tau_j
    logger.debug("mutual kNN: {} mutual pairs, {} kept at tau_j={}", i.size, int(keep.sum()), cfg.tau_j)
    return LocalityGraph(n=n, i=i[keep], j=j[keep], jaccard=scores[keep])


def ensure_connected(graph: LocalityGraph, Z: EmbeddingMatrix) -> LocalityGraph:
    """
    Isolated nodes are attached to their nearest embedding neighbor; remaining components
    are bridged to the largest one through their closest embedding pair. Added edges
    carry a Jaccard score of 0.
    """
    X = Z.values
    add_i: List[int] = []
    add_j: List[int] = []
    isolated = np.flatnonzero(graph.degree() == 0)
    if isolated.size and graph.n > 1:
        nearest = knn_indices(X, 1)[isolated, 0]
        for a, b in zip(isolated, nearest):
            add_i.append(min(a, b))
            add_j.append(max(a, b))
        logger.warning("reattached {} isolated cells to their nearest embedding neighbor", isolated.size)

    g = _with_edges(graph, add_i, add_j)
    n_comp, labels = connected_components(g.adjacency(), directed=False)
    if n_comp > 1:
        main = np.argmax(np.bincount(labels))
        main_idx = np.flatnonzero(labels == main)
        for comp in range(n_comp):
            if comp == main:
                continue
            members = np.flatnonzero(labels == comp)
            D = cdist(X[members], X[main_idx])
            a, b = np.unravel_index(np.argmin(D), D.shape)
            u, v = int(members[a]), int(main_idx[b])
            add_i.append(min(u, v))
            add_j.append(max(u, v))
        logger.warning("bridged {} disconnected components into the largest one", n_comp - 1)
        g = _with_edges(graph, add_i, add_j)
    return g


def _with_edges(graph: LocalityGraph, add_i: List[int], add_j: List[int]) -> LocalityGraph:
    if not add_i:
        return graph
    existing = set(zip(graph.i.tolist(), graph.j.tolist()))
    new = sorted({(a, b) for a, b in zip(add_i, add_j) if a != b and (a, b) not in existing})
    if not new:
        return graph
    ni, nj = (np.array(x, dtype=int) for x in zip(*new))
    return LocalityGraph(
        n=graph.n,
        i=np.concatenate([graph.i, ni]),
        j=np.concatenate([graph.j, nj]),
        jaccard=np.concatenate([graph.jaccard, np.zeros(ni.size)]),
        bridges=graph.bridges + ni.size,
    )


# ---------- patch cover ----------

class _PatchBuilder:
    def __init__(self, graph: LocalityGraph, cfg: PatchConfig, rng: np.random.Generator) -> None:
        self.graph = graph
        self.cfg = cfg
        self.rng = rng
        self.adj = graph.adjacency()
        self.nbrs = [graph.neighbors(v) for v in range(graph.n)]

    def hops_from(self, seed: int) -> np.ndarray:
        return shortest_path(self.adj, unweighted=True, indices=seed, directed=False)

    def grow(self, seed: int, core: np.ndarray, hops: np.ndarray) -> np.ndarray:
        """Random walk with restart from `seed` until the patch holds n_patch cells, BFS order as fallback."""
        target = self.cfg.n_patch
        members = set(core.tolist())
        members.add(seed)
        budget = self.cfg.walks_per_cell * target
        cur = seed
        for _ in range(budget):
            if len(members) >= target:
                break
            if self.rng.random() < RESTART_PROB or self.nbrs[cur].size == 0:
                cur = seed
                continue
            cur = int(self.nbrs[cur][self.rng.integers(self.nbrs[cur].size)])
            members.add(cur)
        if len(members) < target:
            reachable = np.flatnonzero(np.isfinite(hops))
            order = reachable[np.argsort(hops[reachable], kind="stable")]
            for v in order:
                if len(members) >= target:
                    break
                members.add(int(v))
        return np.array(sorted(members), dtype=int)


def sample_patches(graph: LocalityGraph, cfg: PatchConfig, rng: np.random.Generator) -> PatchCover:
    """
    Each new patch is seeded at a cell still short of coverage that touches an existing
    patch (its parent). It inherits the parent cells nearest to the seed by hop distance,
    at least min_shared of them, and is completed by random walks with restart. Patches
    are added until every cell is covered min_multiplicity times.
    """
    n = graph.n
    if cfg.n_patch >= n:
        return PatchCover(patches=(np.arange(n),), neighbors=(), n_cells=n)
    if cfg.n_patch <= cfg.min_shared:
        raise InvalidArgumentError(
            f"n_patch={cfg.n_patch} leaves no room for new cells beside min_shared={cfg.min_shared} inherited ones"
        )
    if graph.n_components() > 1:
        raise InvalidInputError("locality graph must be connected before patch sampling")

    builder = _PatchBuilder(graph, cfg, rng)
    core_size = min(cfg.n_patch - 1, max(cfg.min_shared, math.ceil(cfg.overlap_fraction * cfg.n_patch)))
    mult = np.zeros(n, dtype=int)
    patches: List[np.ndarray] = []
    parents: List[Tuple[int, int]] = []
    where: List[List[int]] = [[] for _ in range(n)]

    def add(patch: np.ndarray) -> int:
        idx = len(patches)
        patches.append(patch)
        mult[patch] += 1
        for v in patch:
            where[v].append(idx)
        return idx

    seed = int(rng.integers(n))
    add(builder.grow(seed, np.empty(0, dtype=int), builder.hops_from(seed)))

    A = builder.adj
    for level in range(1, cfg.min_multiplicity + 1):
        while True:
            short = mult < level
            if not short.any():
                break
            if level == 1:
                touching = np.asarray(A @ (mult > 0).astype(float)).ravel() > 0
                candidates = np.flatnonzero(short & touching)
            else:
                candidates = np.flatnonzero(short)
            seed = int(candidates[rng.integers(candidates.size)])
            if where[seed]:
                parent = where[seed][-1]
            else:
                parent = max(where[int(v)][-1] for v in builder.nbrs[seed] if where[int(v)])
            hops = builder.hops_from(seed)
            pool = patches[parent]
            pool = pool[pool != seed]
            core = pool[np.argsort(hops[pool], kind="stable")[:core_size]]
            child = add(builder.grow(seed, core, hops))
            parents.append((parent, child))

    neighbors = _declared_neighbors(patches, parents, n, cfg.min_shared)
    logger.info(
        "sampled {} patches of {} cells (min multiplicity {}, {} overlap pairs)",
        len(patches), cfg.n_patch, int(mult.min()), len(neighbors),
    )
    return PatchCover(patches=tuple(patches), neighbors=neighbors, n_cells=n)


def _incidence(patches: Sequence[np.ndarray], n: int) -> sparse.csr_matrix:
    rows = np.concatenate([np.full(p.size, k) for k, p in enumerate(patches)])
    cols = np.concatenate(list(patches))
    return sparse.coo_matrix((np.ones(rows.size), (rows, cols)), shape=(len(patches), n)).tocsr()


def shared_counts(patches: Sequence[np.ndarray], n: int) -> sparse.coo_matrix:
    """Upper-triangular patch-by-patch counts of shared cells."""
    B = _incidence(patches, n)
    return sparse.triu(B @ B.T, k=1).tocoo()


def _declared_neighbors(
    patches: Sequence[np.ndarray], parents: Sequence[Tuple[int, int]], n: int, min_shared: int
) -> Tuple[Tuple[int, int], ...]:
    S = shared_counts(patches, n)
    pairs = {(int(p), int(q)) for p, q, c in zip(S.row, S.col, S.data) if c >= min_shared}
    pairs.update((min(p, q), max(p, q)) for p, q in parents)
    return tuple(sorted(pairs))


def check_cover(cover: PatchCover, n: int, min_shared: int) -> List[str]:
    """Invariant violations of a cover; an empty list means the cover is valid."""
    problems: List[str] = []
    if cover.n_cells != n:
        problems.append(f"cover is over {cover.n_cells} cells, expected {n}")
        return problems
    missing = np.flatnonzero(cover.multiplicity() == 0)
    if missing.size:
        problems.append(f"{missing.size} cells are not covered")
    for p, q in cover.neighbors:
        shared = np.intersect1d(cover.patches[p], cover.patches[q]).size
        if shared < min_shared:
            problems.append(f"patches {p} and {q} share {shared} < {min_shared} cells")
    if len(cover) > 1:
        pq = np.array(cover.neighbors, dtype=int).reshape(-1, 2)
        G = sparse.coo_matrix((np.ones(len(pq)), (pq[:, 0], pq[:, 1])), shape=(len(cover), len(cover)))
        if connected_components(G, directed=False)[0] > 1:
            problems.append("patch-overlap graph is disconnected")
    return problems
