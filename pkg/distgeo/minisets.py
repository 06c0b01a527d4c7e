"""
Spatially localized minisets and paired overlapping minisets drawn from an ST slide,
each carrying the canonical factor of its centered Gram matrix as a pose-free target.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Union

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import InvalidArgumentError
from .geometry import CoordinateTable, canonical_factor, center, gram
from .store import RunStore


class MinisetConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    n_min: int = Field(32, ge=2)
    n_max: int = Field(128, ge=2)
    tau_spatial: float = Field(1.0, gt=0)
    alpha: float = Field(0.5, gt=0, le=1)
    min_overlap: int = Field(20, ge=2)
    latent_dim: int = Field(32, ge=1)
    minisets_per_epoch: int = Field(4500, ge=1)
    seed: int = 42

    @model_validator(mode="after")
    def _check_bounds(self) -> "MinisetConfig":
        if self.n_min > self.n_max:
            raise ValueError(f"n_min={self.n_min} exceeds n_max={self.n_max}")
        if self.min_overlap > self.n_min:
            raise ValueError(f"min_overlap={self.min_overlap} exceeds n_min={self.n_min}")
        return self


@dataclass(frozen=True)
class Miniset:
    indices: np.ndarray
    coords: CoordinateTable
    target: np.ndarray
    center: int


@dataclass(frozen=True)
class MinisetPair:
    a: Miniset
    b: Miniset
    shared: np.ndarray


def target_factor(coords, d: int) -> np.ndarray:
    """Canonical factor of the centered Gram matrix, zero-padded to d columns when n < d."""
    G = gram(center(coords))
    n = G.shape[0]
    V = canonical_factor(G, min(d, n))
    if V.shape[1] < d:
        V = np.hstack([V, np.zeros((n, d - V.shape[1]))])
    return V


def locality_weights(slide: CoordinateTable, center_index: int, tau: float, exclude: Sequence[int] = ()) -> np.ndarray:
    """Normalized p(i | c) proportional to exp(-delta_ic / tau) over the candidates not excluded."""
    delta = np.linalg.norm(slide.coords - slide.coords[center_index], axis=1)
    mask = np.ones(len(slide), dtype=bool)
    mask[center_index] = False
    mask[list(exclude)] = False
    logits = np.where(mask, -delta / tau, -np.inf)
    logits -= logits[mask].max()
    w = np.exp(logits)
    return w / w.sum()


def _draw_local(delta: np.ndarray, available: np.ndarray, count: int, tau: float, rng: np.random.Generator) -> List[int]:
    """Sequential weighted draws without replacement, renormalizing after each pick."""
    picked: List[int] = []
    avail = available.copy()
    for _ in range(count):
        cand = np.flatnonzero(avail)
        logits = -delta[cand] / tau
        w = np.exp(logits - logits.max())
        choice = int(cand[rng.choice(cand.size, p=w / w.sum())])
        picked.append(choice)
        avail[choice] = False
    return picked


def _build(slide: CoordinateTable, indices: Sequence[int], c: int, d: int) -> Miniset:
    idx = np.asarray(indices, dtype=int)
    sub = slide.subset(idx)
    return Miniset(indices=idx, coords=sub, target=target_factor(sub.coords, d), center=c)


def _check_slide(slide: CoordinateTable, cfg: MinisetConfig) -> None:
    if len(slide) < cfg.n_max:
        raise InvalidArgumentError(f"slide has {len(slide)} points, fewer than n_max={cfg.n_max}")


def sample_miniset(slide: CoordinateTable, cfg: MinisetConfig, rng: np.random.Generator) -> Miniset:
    _check_slide(slide, cfg)
    n = int(rng.integers(cfg.n_min, cfg.n_max + 1))
    c = int(rng.integers(len(slide)))
    delta = np.linalg.norm(slide.coords - slide.coords[c], axis=1)
    avail = np.ones(len(slide), dtype=bool)
    avail[c] = False
    rest = _draw_local(delta, avail, n - 1, cfg.tau_spatial, rng)
    return _build(slide, [c] + rest, c, cfg.latent_dim)


def shared_size(n: int, cfg: MinisetConfig) -> int:
    return min(n, max(cfg.min_overlap, int(np.floor(cfg.alpha * n))))


def sample_paired_minisets(slide: CoordinateTable, cfg: MinisetConfig, rng: np.random.Generator) -> MinisetPair:
    """
    The shared set is drawn once around the center; each view then completes itself
    independently around the same center.
    """
    _check_slide(slide, cfg)
    n = int(rng.integers(cfg.n_min, cfg.n_max + 1))
    c = int(rng.integers(len(slide)))
    m = shared_size(n, cfg)
    delta = np.linalg.norm(slide.coords - slide.coords[c], axis=1)

    avail = np.ones(len(slide), dtype=bool)
    avail[c] = False
    shared = [c] + _draw_local(delta, avail, m - 1, cfg.tau_spatial, rng)
    avail[shared] = False

    views = []
    for _ in range(2):
        extra = _draw_local(delta, avail, n - m, cfg.tau_spatial, rng)
        views.append(_build(slide, shared + extra, c, cfg.latent_dim))
    return MinisetPair(a=views[0], b=views[1], shared=np.asarray(sorted(shared), dtype=int))


class MinisetSampler:
    """Holds its own generator; use one sampler per thread."""

    def __init__(self, slide: CoordinateTable, cfg: MinisetConfig) -> None:
        _check_slide(slide, cfg)
        self.slide = slide
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)

    def miniset(self) -> Miniset:
        return sample_miniset(self.slide, self.cfg, self.rng)

    def pair(self) -> MinisetPair:
        return sample_paired_minisets(self.slide, self.cfg, self.rng)

    def pairs(self, count: int) -> List[MinisetPair]:
        return [self.pair() for _ in range(count)]


def write_minisets(pairs: Sequence[MinisetPair], directory: Union[str, Path], cfg: MinisetConfig) -> Path:
    """One coordinate CSV per view plus a JSON manifest of indices, shared sets, config and seed."""
    store = RunStore(directory)
    entries = []
    for p, pair in enumerate(pairs):
        names = []
        for tag, view in (("a", pair.a), ("b", pair.b)):
            name = f"pair{p:05d}_{tag}.csv"
            store.put_csv(name, view.coords.to_frame())
            names.append(name)
        entries.append(
            {
                "a": {"file": names[0], "indices": pair.a.indices.tolist(), "center": pair.a.center},
                "b": {"file": names[1], "indices": pair.b.indices.tolist(), "center": pair.b.center},
                "shared": pair.shared.tolist(),
            }
        )
    logger.info("wrote {} miniset pairs to {}", len(pairs), store.root)
    store.put_json("minisets.json", {"config": cfg.model_dump(), "seed": cfg.seed, "pairs": entries})
    return store.root / "minisets.json"
