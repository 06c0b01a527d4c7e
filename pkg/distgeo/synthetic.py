"""
Desk-scale ground truth: synthetic slides whose expression depends on position,
pseudo-spot aggregation onto a square grid, and oracle per-patch geometry predictors
standing in for a trained model.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Protocol, Tuple, Union

import numpy as np
import pandas as pd
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.stats import ortho_group
from sklearn.neighbors import KNeighborsClassifier

from .diffusion import (
    DiffusionConfig,
    GaussianInnerNetwork,
    PreconditionedDenoiser,
    make_schedule,
    residual_target,
    sample_residual,
)
from .errors import CsvFormatError, InvalidArgumentError, InvalidInputError
from .geometry import CoordinateTable, _as_matrix, center, knn_indices
from .store import RunStore


class SyntheticConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    n_cells: int = Field(2000, ge=1)
    n_genes: int = Field(50, ge=2)
    n_domains: int = Field(5, ge=1)
    expression_noise_std: float = Field(0.05, ge=0)
    domain_sharpness: float = Field(3.0, gt=0)
    bump_width: float = Field(0.25, gt=0)
    seed: int = 42

    @model_validator(mode="after")
    def _check_domains(self) -> "SyntheticConfig":
        if self.n_cells < self.n_domains:
            raise ValueError(f"n_cells={self.n_cells} is smaller than n_domains={self.n_domains}")
        return self


class SpotConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    enabled: bool = False
    pitch: float = Field(0.05, gt=0)
    min_cells: int = Field(1, ge=1)


class OraclePredictorConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    distance_noise: float = Field(0.02, ge=0)
    apply_random_rotation: bool = True
    latent_dim: int = Field(32, ge=2)
    calibration_k: int = Field(20, ge=1)
    patch_scale: Dict[int, float] = Field(default_factory=dict)
    proposal_noise: float = Field(0.1, ge=0)
    seed: int = 42


class Predictor(Protocol):
    def __call__(self, patch: int, cells: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class SyntheticSlide:
    coords: CoordinateTable
    expression: np.ndarray
    genes: Tuple[str, ...]
    domains: np.ndarray

    def write(self, store: RunStore) -> None:
        store.put_csv("coords.csv", self.coords.to_frame())
        frame = pd.DataFrame(self.expression, columns=list(self.genes))
        frame.insert(0, "id", list(self.coords.ids))
        store.put_csv("expression.csv", frame)
        store.put_csv("domains.csv", pd.DataFrame({"id": list(self.coords.ids), "domain": self.domains}))

    @classmethod
    def read(cls, directory: Union[str, Path]) -> "SyntheticSlide":
        directory = Path(directory)
        coords = CoordinateTable.read_csv(directory / "coords.csv")
        path = str(directory / "expression.csv")
        try:
            expr = pd.read_csv(path, dtype={"id": str}, float_precision="round_trip")
        except (pd.errors.ParserError, pd.errors.EmptyDataError, OSError) as e:
            raise CsvFormatError(path, f"unreadable CSV ({e})") from e
        if expr.columns[0] != "id" or expr.shape[1] < 2:
            raise CsvFormatError(path, "expected header id,<gene>,...", line=1)
        if tuple(expr["id"]) != coords.ids:
            raise CsvFormatError(path, "expression rows do not match coords.csv ids")
        values = expr.iloc[:, 1:].apply(pd.to_numeric, errors="coerce").to_numpy(dtype=float)
        bad = ~np.isfinite(values).all(axis=1)
        if bad.any():
            raise CsvFormatError(path, "missing or non-numeric value", line=int(np.flatnonzero(bad)[0]) + 2)
        domains_path = directory / "domains.csv"
        if domains_path.exists():
            domains = pd.read_csv(domains_path, dtype={"id": str})["domain"].to_numpy(dtype=int)
        else:
            domains = np.zeros(len(coords), dtype=int)
        return cls(coords=coords, expression=values, genes=tuple(expr.columns[1:]), domains=domains)


@dataclass(frozen=True)
class SpotSlide:
    coords: Optional[CoordinateTable]
    expression: np.ndarray
    members: Tuple[np.ndarray, ...]
    discarded: np.ndarray

    def __len__(self) -> int:
        return len(self.members)

    def write(self, store: RunStore, prefix: str = "spots/") -> None:
        ids = list(self.coords.ids) if self.coords is not None else []
        coords = self.coords.to_frame() if self.coords is not None else pd.DataFrame(columns=["id", "x", "y"])
        store.put_csv(f"{prefix}coords.csv", coords)
        frame = pd.DataFrame(self.expression)
        frame.columns = [f"gene{g}" for g in range(self.expression.shape[1])]
        frame.insert(0, "id", ids)
        store.put_csv(f"{prefix}expression.csv", frame)
        store.put_json(
            f"{prefix}members.json",
            {"members": {sid: m.tolist() for sid, m in zip(ids, self.members)},
             "discarded": self.discarded.tolist()},
        )


# ---------- slides ----------

def domain_centers(n_domains: int) -> Tuple[np.ndarray, int, int]:
    """Centers of a near-square grid in the unit square, filled row by row."""
    rows = max(1, math.floor(math.sqrt(n_domains)))
    cols = math.ceil(n_domains / rows)
    k = np.arange(n_domains)
    centers = np.stack([(k % cols + 0.5) / cols, (k // cols + 0.5) / rows], axis=1)
    return centers, rows, cols


def _reflect(x: np.ndarray) -> np.ndarray:
    # folds values into [0, 1] by mirroring at the borders
    return 1.0 - np.abs(1.0 - np.abs(x) % 2.0)


def generate_slide(cfg: SyntheticConfig = SyntheticConfig(), rng: Optional[np.random.Generator] = None) -> SyntheticSlide:
    """
    Cells from a mixture of planar Gaussians on a grid of domain centers. Every gene belongs
    to one domain group and follows a radial bump around that domain's center.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    centers, rows, cols = domain_centers(cfg.n_domains)
    std = np.array([0.5 / cols, 0.5 / rows]) / cfg.domain_sharpness

    domains = rng.integers(cfg.n_domains, size=cfg.n_cells)
    coords = _reflect(centers[domains] + rng.normal(size=(cfg.n_cells, 2)) * std)

    group = np.arange(cfg.n_genes) % cfg.n_domains
    amplitude = rng.uniform(0.5, 1.5, size=cfg.n_genes)
    sq = np.sum((coords[:, None, :] - centers[group][None, :, :]) ** 2, axis=2)
    expression = amplitude[None, :] * np.exp(-sq / (2.0 * cfg.bump_width**2))
    if cfg.expression_noise_std > 0:
        expression = expression + rng.normal(0.0, cfg.expression_noise_std, size=expression.shape)
    expression = np.clip(expression, 0.0, None)

    width = len(str(cfg.n_cells - 1))
    ids = tuple(f"cell{i:0{width}d}" for i in range(cfg.n_cells))
    logger.info("generated slide: {} cells, {} genes, {} domains", cfg.n_cells, cfg.n_genes, cfg.n_domains)
    return SyntheticSlide(
        coords=CoordinateTable(ids=ids, coords=coords),
        expression=expression,
        genes=tuple(f"gene{g}" for g in range(cfg.n_genes)),
        domains=domains,
    )


def pseudo_spot_aggregate(coords, expression, pitch: float, min_cells: int = 1) -> SpotSlide:
    """Cells binned into grid squares of side `pitch`; spots with fewer than min_cells members are discarded."""
    if pitch <= 0:
        raise InvalidArgumentError("pitch must be positive")
    P = coords.coords if isinstance(coords, CoordinateTable) else _as_matrix(coords, "coords")
    E = _as_matrix(expression, "expression")
    if E.shape[0] != P.shape[0]:
        raise InvalidArgumentError(f"{E.shape[0]} expression rows for {P.shape[0]} cells")
    origin = P.min(axis=0)
    cell = np.floor((P - origin) / pitch).astype(np.int64)
    keys, inverse = np.unique(cell, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).ravel()

    members: List[np.ndarray] = []
    spot_xy: List[np.ndarray] = []
    spot_ids: List[str] = []
    discarded: List[np.ndarray] = []
    for s, key in enumerate(keys):
        idx = np.flatnonzero(inverse == s)
        if idx.size < min_cells:
            discarded.append(idx)
            continue
        members.append(idx)
        spot_xy.append(origin + (key + 0.5) * pitch)
        spot_ids.append(f"spot{key[1]}_{key[0]}")

    dropped = np.sort(np.concatenate(discarded)) if discarded else np.empty(0, dtype=int)
    if not members:
        logger.warning("pseudo-spot grid kept no spots (min_cells={})", min_cells)
        return SpotSlide(coords=None, expression=np.empty((0, E.shape[1])), members=(), discarded=dropped)
    summed = np.stack([E[m].sum(axis=0) for m in members])
    return SpotSlide(
        coords=CoordinateTable(ids=tuple(spot_ids), coords=np.stack(spot_xy)),
        expression=summed,
        members=tuple(members),
        discarded=dropped,
    )


def domain_recovery_accuracy(expression, labels) -> float:
    """Leave-one-out 1-NN accuracy of the domain labels from expression."""
    X = _as_matrix(expression, "expression")
    y = np.asarray(labels)
    if X.shape[0] < 2:
        raise InvalidArgumentError("need at least 2 cells")
    clf = KNeighborsClassifier(n_neighbors=1).fit(X, y)
    nearest = clf.kneighbors(X, n_neighbors=2, return_distance=False)
    self_first = nearest[:, 0] == np.arange(X.shape[0])
    other = np.where(self_first, nearest[:, 1], nearest[:, 0])
    return float(np.mean(y[other] == y))


# ---------- predictors ----------

class OraclePredictor:
    """
    Emits the GT geometry of a patch, centered, zero-padded to latent_dim columns, with
    per-point jitter calibrated to the requested log-distance noise on the patch's kNN
    pairs, and rotated by a fresh orthogonal matrix. Each patch draws from a generator
    seeded by (seed, patch), so instances can be shared across threads.
    """

    def __init__(self, gt_coords: Union[CoordinateTable, np.ndarray], cfg: OraclePredictorConfig = OraclePredictorConfig()) -> None:
        P = gt_coords.coords if isinstance(gt_coords, CoordinateTable) else _as_matrix(gt_coords, "gt_coords")
        self.coords = np.array(P)
        self.coords.setflags(write=False)
        self.cfg = cfg

    def _rng(self, patch: int) -> np.random.Generator:
        return np.random.default_rng([self.cfg.seed, patch])

    def _check(self, cells) -> np.ndarray:
        idx = np.asarray(cells, dtype=int)
        if idx.size == 0 or np.any(idx < 0) or np.any(idx >= self.coords.shape[0]):
            raise InvalidArgumentError("patch references unknown cells")
        return idx

    def jitter_scale(self, P: np.ndarray) -> float:
        """Per-point std s with 2 s^2 mean(1/d^2) = noise^2 over the kNN pairs of P."""
        if self.cfg.distance_noise == 0 or P.shape[0] < 2:
            return 0.0
        k = min(self.cfg.calibration_k, P.shape[0] - 1)
        nn = knn_indices(P, k)
        d = np.linalg.norm(P[np.repeat(np.arange(P.shape[0]), k)] - P[nn.ravel()], axis=1)
        d = d[d > 0]
        if d.size == 0:
            return 0.0
        return self.cfg.distance_noise / math.sqrt(2.0 * float(np.mean(1.0 / d**2)))

    def _embed(self, P: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        d = self.cfg.latent_dim
        V = np.zeros((P.shape[0], d))
        V[:, : P.shape[1]] = P
        if self.cfg.apply_random_rotation:
            V = V @ ortho_group.rvs(d, random_state=rng)
        return V

    def __call__(self, patch: int, cells) -> np.ndarray:
        idx = self._check(cells)
        rng = self._rng(patch)
        P = center(self.coords[idx])
        s = self.jitter_scale(P)
        if s > 0:
            P = center(P + rng.normal(0.0, s, size=P.shape))
        P = P * self.cfg.patch_scale.get(patch, 1.0)
        return self._embed(P, rng)


class AnalyticDiffusionPredictor(OraclePredictor):
    """
    The oracle geometry is the target; a perturbed, rotated copy is the generator proposal.
    The residual between them (after alignment) is refined by probability-flow sampling
    with a preconditioned Gaussian denoiser concentrated at the residual target.
    """

    def __init__(
        self,
        gt_coords: Union[CoordinateTable, np.ndarray],
        cfg: OraclePredictorConfig = OraclePredictorConfig(),
        diffusion: DiffusionConfig = DiffusionConfig(),
        prior_rel: float = 1e-3,
    ) -> None:
        super().__init__(gt_coords, cfg)
        self.diffusion = diffusion
        self.schedule = make_schedule(diffusion)
        self.prior_rel = prior_rel

    def __call__(self, patch: int, cells) -> np.ndarray:
        target = super().__call__(patch, cells)
        rng = np.random.default_rng([self.cfg.seed, patch, 1])
        rms = math.sqrt(float(np.mean(np.sum(target**2, axis=1)))) or 1.0
        proposal = target + rng.normal(0.0, self.cfg.proposal_noise * rms / math.sqrt(target.shape[1]), size=target.shape)
        proposal = center(proposal @ ortho_group.rvs(target.shape[1], random_state=rng))

        _, R_target = residual_target(target, proposal)
        s = self.prior_rel * rms + 1e-12
        denoiser = PreconditionedDenoiser(
            GaussianInnerNetwork(R_target, s, self.diffusion.sigma_data), self.diffusion.sigma_data
        )
        return sample_residual(proposal, denoiser, self.schedule, rng)


def make_predictor(kind: str, gt_coords, cfg: OraclePredictorConfig, diffusion: DiffusionConfig) -> Predictor:
    if kind == "oracle":
        return OraclePredictor(gt_coords, cfg)
    if kind == "analytic":
        return AnalyticDiffusionPredictor(gt_coords, cfg, diffusion)
    raise InvalidInputError(f"unknown predictor {kind!r}")
