"""
Global 2D distance-geometry solve over a stitched graph: Landmark-Isomap initialization
per connected component, then Adam descent on a weighted Huber stress with an anchor
term pulling toward the initialization.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field
from scipy import linalg, sparse
from scipy.sparse.csgraph import connected_components, dijkstra

from .errors import InitializationError, InvalidArgumentError, InvalidInputError
from .geometry import CoordinateTable, _as_matrix, pairwise_distances
from .stitching import StitchedGraph

# second MDS eigenvalue below this fraction of the first counts as degenerate
DEGENERATE_EIG = 1e-10
JITTER_SCALE = 1e-7
MONOTONE_WINDOW = 100
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

Coords = Union[CoordinateTable, np.ndarray]


class SolverConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    n_landmarks: int = Field(128, ge=3)
    iterations: int = Field(1000, ge=1)
    huber_delta: float = Field(0.1, gt=0)
    anchor_weight: float = Field(0.1, ge=0)
    step_size: float = Field(1e-2, gt=0)
    checkpoint_every: int = Field(50, ge=1)
    seed: int = 42


@dataclass
class SolveDiagnostics:
    checkpoints: List[int] = field(default_factory=list)
    huber: List[float] = field(default_factory=list)
    stress: List[float] = field(default_factory=list)
    residual_mean: float = 0.0
    residual_median: float = 0.0
    residual_max: float = 0.0
    initial_objective: float = 0.0
    final_objective: float = 0.0
    final_stress: float = 0.0
    best_iteration: int = 0
    scale_factor: float = 1.0
    n_components: int = 1
    n_orphans: int = 0
    window_violations: int = 0
    aborted: bool = False

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _coords(X: Coords) -> np.ndarray:
    if isinstance(X, CoordinateTable):
        return np.array(X.coords)
    return _as_matrix(X, "X")


def _adjacency(graph: StitchedGraph) -> sparse.csr_matrix:
    n = graph.n_nodes
    A = sparse.coo_matrix((graph.d, (graph.i, graph.j)), shape=(n, n)).tocsr()
    return (A + A.T).tocsr()


# ---------- initialization ----------

def _classical_mds(delta_sq: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Top-2 classical MDS of squared distances; returns (coords, evals, evecs)."""
    L = delta_sq.shape[0]
    H = np.eye(L) - np.full((L, L), 1.0 / L)
    B = -0.5 * H @ delta_sq @ H
    evals, evecs = linalg.eigh(0.5 * (B + B.T))
    order = np.argsort(evals)[::-1][:2]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    if evals[0] <= 0:
        raise InitializationError("landmark distances carry no spread to embed")
    return evecs * np.sqrt(evals)[None, :], evals, evecs


def _embed_component(A: sparse.csr_matrix, nodes: np.ndarray, n_landmarks: int, rng: np.random.Generator) -> np.ndarray:
    m = nodes.size
    if m == 1:
        return np.zeros((1, 2))
    sub = A[nodes][:, nodes]
    if m == 2:
        return np.array([[0.0, 0.0], [float(sub[0, 1]), 0.0]])

    n_land = min(n_landmarks, m)
    landmarks = [int(rng.integers(m))]
    rows = [dijkstra(sub, directed=False, indices=landmarks[0])]
    nearest = rows[0].copy()
    while len(landmarks) < n_land:
        nxt = int(np.argmax(nearest))
        if nearest[nxt] <= 0:
            break
        landmarks.append(nxt)
        rows.append(dijkstra(sub, directed=False, indices=nxt))
        nearest = np.minimum(nearest, rows[-1])
    if len(landmarks) < 3:
        raise InitializationError(f"only {len(landmarks)} distinct landmarks reachable")

    D = np.vstack(rows)
    if not np.all(np.isfinite(D)):
        raise InitializationError("landmark shortest paths do not reach the whole component")
    delta_sq = D[:, landmarks] ** 2
    _, evals, evecs = _classical_mds(delta_sq)

    # landmark triangulation: x_a = 1/2 L# (mean column - delta_a)
    mean_col = delta_sq.mean(axis=1)
    X = np.zeros((m, 2))
    X[:, 0] = 0.5 * (evecs[:, 0] / math.sqrt(evals[0])) @ (mean_col[:, None] - D**2)
    if evals[1] > DEGENERATE_EIG * evals[0]:
        X[:, 1] = 0.5 * (evecs[:, 1] / math.sqrt(evals[1])) @ (mean_col[:, None] - D**2)
    else:
        rms = float(np.sqrt(np.mean(X[:, 0] ** 2))) or 1.0
        X[:, 1] = rng.normal(0.0, JITTER_SCALE * rms, size=m)
        logger.debug("degenerate second MDS axis on a component of {} nodes, jittered", m)
    return X - X.mean(axis=0, keepdims=True)


def _components(graph: StitchedGraph) -> Tuple[sparse.csr_matrix, List[np.ndarray]]:
    A = _adjacency(graph)
    _, labels = connected_components(A, directed=False)
    comps = [np.flatnonzero(labels == c) for c in np.unique(labels)]
    comps.sort(key=lambda c: (-c.size, c[0]))
    return A, comps


def landmark_isomap_init(
    graph: StitchedGraph, cfg: SolverConfig = SolverConfig(), rng: Optional[np.random.Generator] = None,
    ids: Optional[Sequence[str]] = None,
) -> CoordinateTable:
    """
    Farthest-point landmarks on graph distances, classical MDS on the landmarks and
    triangulation of every other node. Components with edges are embedded separately and
    laid out on a grid spaced by three times the largest component extent; nodes without
    any edge sit at the centroid of the largest component plus jitter.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    if graph.n_edges == 0:
        raise InitializationError("stitched graph has no edges")
    A, comps = _components(graph)
    if comps[0].size < 3:
        raise InitializationError(f"largest component has {comps[0].size} nodes, need at least 3")

    X = np.zeros((graph.n_nodes, 2))
    linked = [nodes for nodes in comps if nodes.size > 1]
    isolated = np.concatenate([nodes for nodes in comps if nodes.size == 1] or [np.zeros(0, dtype=int)])
    parts = [_embed_component(A, nodes, cfg.n_landmarks, rng) for nodes in linked]
    if len(linked) > 1:
        extent = max(float(np.ptp(P, axis=0).max()) for P in parts)
        spacing = 3.0 * (extent or 1.0)
        cols = math.ceil(math.sqrt(len(linked)))
        for k, P in enumerate(parts):
            parts[k] = P + spacing * np.array([k % cols, k // cols], dtype=float)
    for nodes, P in zip(linked, parts):
        X[nodes] = P
    if isolated.size:
        main = parts[0]
        rms = float(np.sqrt(np.mean((main - main.mean(axis=0)) ** 2))) or 1.0
        X[isolated] = main.mean(axis=0) + rng.normal(0.0, JITTER_SCALE * rms, size=(isolated.size, 2))
    if len(comps) > 1:
        logger.warning(
            "stitched graph has {} components; {} cells outside the largest, {} without edges",
            len(comps), graph.n_nodes - comps[0].size, isolated.size,
        )
    X -= X.mean(axis=0, keepdims=True)
    if ids is None:
        return CoordinateTable.from_array(X)
    return CoordinateTable(ids=tuple(ids), coords=X)


# ---------- objective ----------

def _edge_terms(X: np.ndarray, graph: StitchedGraph) -> Tuple[np.ndarray, np.ndarray]:
    diff = X[graph.i] - X[graph.j]
    return diff, np.sqrt(np.sum(diff**2, axis=1))


def huber_stress(X: Coords, graph: StitchedGraph, X0: Coords, cfg: SolverConfig = SolverConfig()) -> Tuple[float, np.ndarray]:
    """sum omega * H_delta(|x_i - x_j| - d) + anchor * ||X - X0||^2 with its analytic gradient."""
    X = _coords(X)
    X0 = _coords(X0)
    if X.shape != X0.shape:
        raise InvalidArgumentError(f"X {X.shape} and X0 {X0.shape} differ in shape")
    delta = cfg.huber_delta
    diff, dist = _edge_terms(X, graph)
    r = dist - graph.d
    a = np.abs(r)
    h = np.where(a <= delta, 0.5 * r**2, delta * (a - 0.5 * delta))
    anchor = X - X0
    value = float(np.sum(graph.omega * h)) + cfg.anchor_weight * float(np.sum(anchor**2))

    psi = graph.omega * np.clip(r, -delta, delta)
    # coincident endpoints contribute no gradient
    unit = np.divide(diff, dist[:, None], out=np.zeros_like(diff), where=dist[:, None] > 0)
    contrib = psi[:, None] * unit
    n = X.shape[0]
    grad = np.empty_like(X)
    for c in range(X.shape[1]):
        grad[:, c] = np.bincount(graph.i, contrib[:, c], minlength=n) - np.bincount(graph.j, contrib[:, c], minlength=n)
    grad += 2.0 * cfg.anchor_weight * anchor
    return value, grad


def edge_residuals(X: Coords, graph: StitchedGraph) -> np.ndarray:
    _, dist = _edge_terms(_coords(X), graph)
    return np.abs(dist - graph.d)


def stress1_on_edges(X: Coords, graph: StitchedGraph) -> float:
    """Kruskal Stress-1 restricted to the graph's edges."""
    _, dist = _edge_terms(_coords(X), graph)
    denom = float(np.sum(graph.d**2))
    if denom <= 0:
        raise InvalidInputError("stress of an empty edge set")
    return math.sqrt(float(np.sum((dist - graph.d) ** 2)) / denom)


# ---------- solve ----------

def solve(
    graph: StitchedGraph,
    cfg: SolverConfig = SolverConfig(),
    rng: Optional[np.random.Generator] = None,
    ids: Optional[Sequence[str]] = None,
) -> Tuple[CoordinateTable, SolveDiagnostics]:
    """
    Edges are scaled to unit median before descent and coordinates scaled back after.
    The best iterate seen is returned, so the final objective never exceeds the initial one.
    """
    if graph.n_edges == 0:
        raise InvalidInputError("cannot solve an empty stitched graph")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    scale = float(np.median(graph.d))
    g = graph.scaled(1.0 / scale)

    init = landmark_isomap_init(g, cfg, rng)
    X0 = np.array(init.coords)
    _, comps = _components(g)
    diag = SolveDiagnostics(scale_factor=scale, n_components=len(comps), n_orphans=g.n_nodes - comps[0].size)

    X = X0.copy()
    m = np.zeros_like(X)
    v = np.zeros_like(X)
    b1, b2 = ADAM_BETAS
    best_X, best_val, best_it = X.copy(), math.inf, 0
    window_start = None

    def checkpoint(it: int, value: float, at: np.ndarray) -> None:
        diag.checkpoints.append(it)
        diag.huber.append(value)
        diag.stress.append(stress1_on_edges(at, g))

    for it in range(cfg.iterations + 1):
        value, grad = huber_stress(X, g, X0, cfg)
        if not (math.isfinite(value) and np.all(np.isfinite(grad))):
            diag.aborted = True
            logger.error("non-finite stress at iteration {}; returning best finite iterate", it)
            break
        if it == 0:
            diag.initial_objective = value
            window_start = value
        if value < best_val:
            best_X, best_val, best_it = X.copy(), value, it
        if it % cfg.checkpoint_every == 0 or it == cfg.iterations:
            checkpoint(it, value, X)
        if it > 0 and it % MONOTONE_WINDOW == 0:
            if value > window_start:
                diag.window_violations += 1
                logger.warning("stress rose over iterations {}-{}: {:.6g} -> {:.6g}", it - MONOTONE_WINDOW, it, window_start, value)
            window_start = value
        if it == cfg.iterations:
            break
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad**2
        m_hat = m / (1 - b1 ** (it + 1))
        v_hat = v / (1 - b2 ** (it + 1))
        X = X - cfg.step_size * m_hat / (np.sqrt(v_hat) + ADAM_EPS)

    res = edge_residuals(best_X, g)
    diag.final_objective = best_val
    diag.best_iteration = best_it
    diag.final_stress = stress1_on_edges(best_X, g)
    diag.residual_mean = float(res.mean())
    diag.residual_median = float(np.median(res))
    diag.residual_max = float(res.max())
    logger.info(
        "solve: objective {:.6g} -> {:.6g} (best at {}), edge Stress-1 {:.4g}, max residual {:.4g}",
        diag.initial_objective, best_val, best_it, diag.final_stress, diag.residual_max,
    )

    out = best_X * scale
    if ids is None:
        return CoordinateTable.from_array(out), diag
    return CoordinateTable(ids=tuple(ids), coords=out), diag


def dense_distances(X: Coords) -> np.ndarray:
    return pairwise_distances(_coords(X))
