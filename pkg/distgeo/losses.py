"""
Supervision quantities as pure scalar functions: VICReg and its augmentations, Gram and
log-trace losses, the NCA neighborhood loss, generator losses and overlap consistency.
Every geometry loss centers its factors first, so all of them are pose invariant.
"""
from __future__ import annotations

from typing import Dict, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.spatial.distance import pdist, squareform
from scipy.special import logsumexp, softmax

from .errors import (
    DegenerateEdgeError,
    DegenerateOverlapError,
    DegenerateTargetError,
    InvalidArgumentError,
)
from .geometry import _as_matrix, center, gram, knn_indices, procrustes_align


class VICRegConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    lambda_inv: float = Field(25.0, ge=0)
    lambda_var: float = Field(25.0, ge=0)
    lambda_cov: float = Field(1.0, ge=0)
    gamma: float = Field(1.0, gt=0)


class AugmentConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    dropout_rate: float = Field(0.3, ge=0, lt=1)
    noise_std: float = Field(0.015, ge=0)
    jitter_range: float = Field(0.25, ge=0, lt=1)


class LossConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    k_nca: int = Field(15, ge=1)
    tau_nca: float = Field(0.5, gt=0)
    w_gram: float = Field(1.0, ge=0)
    w_gram_scale: float = Field(0.5, ge=0)
    w_nca: float = Field(1.0, ge=0)
    w_overlap: float = Field(1.0, ge=0)
    sigma_gate: float = Field(1.0, gt=0)


class VICRegTerms(NamedTuple):
    inv: float
    var: float
    cov: float
    total: float


class GeneratorTerms(NamedTuple):
    align: float
    gram: float


class OverlapTerms(NamedTuple):
    shape: float
    scale: float


def _masked(V: np.ndarray, mask: Optional[np.ndarray]) -> np.ndarray:
    if mask is None:
        return V
    return V[np.asarray(mask).astype(bool)]


def _masked_gram(G: np.ndarray, mask: Optional[np.ndarray]) -> np.ndarray:
    if mask is None:
        return G
    keep = np.asarray(mask).astype(bool)
    return G[np.ix_(keep, keep)]


# ---------- expression embedding objective ----------

def vicreg_loss(z1, z2, cfg: VICRegConfig = VICRegConfig()) -> VICRegTerms:
    z1 = _as_matrix(z1, "z1")
    z2 = _as_matrix(z2, "z2")
    if z1.shape != z2.shape:
        raise InvalidArgumentError(f"view shapes differ: {z1.shape} vs {z2.shape}")
    if z1.shape[0] < 2:
        raise InvalidArgumentError("VICReg needs a batch of at least 2 rows")

    inv = float(np.sum((z1 - z2) ** 2))
    var = 0.0
    cov = 0.0
    for z in (z1, z2):
        std = z.std(axis=0, ddof=1)
        var += float(np.sum(np.maximum(0.0, cfg.gamma - std)))
        C = np.atleast_2d(np.cov(z, rowvar=False, ddof=1))
        off = C - np.diag(np.diag(C))
        cov += float(np.sum(off**2))
    total = cfg.lambda_inv * inv + cfg.lambda_var * var + cfg.lambda_cov * cov
    return VICRegTerms(inv=inv, var=var, cov=cov, total=total)


def augment(x, cfg: AugmentConfig, seed) -> np.ndarray:
    """Gene dropout, then additive Gaussian noise, then one multiplicative jitter for the whole vector."""
    x = np.asarray(x, dtype=float)
    rng = np.random.default_rng(seed)
    out = x.copy()
    if cfg.dropout_rate > 0:
        out = out * (rng.random(x.shape) >= cfg.dropout_rate)
    if cfg.noise_std > 0:
        out = out + rng.normal(0.0, cfg.noise_std, size=x.shape)
    if cfg.jitter_range > 0:
        out = out * rng.uniform(1.0 - cfg.jitter_range, 1.0 + cfg.jitter_range)
    return out


# ---------- Gram supervision ----------

def gram_loss(V_pred, G_target, mask=None) -> float:
    G_target = _masked_gram(_as_matrix(G_target, "G_target"), mask)
    V = center(_masked(_as_matrix(V_pred, "V_pred"), mask))
    denom = float(np.sum(G_target**2))
    if denom <= 0:
        raise DegenerateTargetError("target Gram matrix has zero Frobenius norm")
    return float(np.sum((gram(V) - G_target) ** 2)) / denom


def gram_scale_loss(V_pred, G_target, mask=None) -> float:
    G_target = _masked_gram(_as_matrix(G_target, "G_target"), mask)
    V = center(_masked(_as_matrix(V_pred, "V_pred"), mask))
    tr_pred = float(np.sum(V**2))
    tr_target = float(np.trace(G_target))
    if tr_pred <= 0 or tr_target <= 0:
        raise DegenerateTargetError(f"log-trace needs positive traces (pred={tr_pred}, target={tr_target})")
    return (np.log(tr_pred) - np.log(tr_target)) ** 2


def _squared_distances(V: np.ndarray) -> np.ndarray:
    return squareform(pdist(V, "sqeuclidean"))


def nca_loss(V_pred, target_neighbors: Sequence[Sequence[int]], tau: float) -> float:
    V = center(_as_matrix(V_pred, "V_pred"))
    n = V.shape[0]
    if n < 3:
        raise InvalidArgumentError("NCA loss needs at least 3 points")
    if len(target_neighbors) != n:
        raise InvalidArgumentError(f"{len(target_neighbors)} neighbor sets for {n} points")
    if tau <= 0:
        raise InvalidArgumentError("tau must be positive")

    logits = -_squared_distances(V) / tau
    total = 0.0
    everyone = np.arange(n)
    for i, nbrs in enumerate(target_neighbors):
        idx = np.unique(np.asarray(list(nbrs), dtype=int))
        if idx.size == 0:
            raise InvalidArgumentError(f"neighbor set of point {i} is empty")
        if np.any(idx == i):
            raise InvalidArgumentError(f"neighbor set of point {i} contains the point itself")
        others = everyone[everyone != i]
        total -= logsumexp(logits[i, idx]) - logsumexp(logits[i, others])
    return float(total)


def edge_log_scale_loss(V_pred, V_target_aligned, knn_edges) -> float:
    V = _as_matrix(V_pred, "V_pred")
    T = _as_matrix(V_target_aligned, "V_target_aligned")
    edges = np.asarray(knn_edges, dtype=int).reshape(-1, 2)
    if edges.shape[0] == 0:
        raise InvalidArgumentError("edge set is empty")
    d_target = np.linalg.norm(T[edges[:, 0]] - T[edges[:, 1]], axis=1)
    d_pred = np.linalg.norm(V[edges[:, 0]] - V[edges[:, 1]], axis=1)
    if np.any(d_target <= 0):
        raise DegenerateEdgeError("target geometry has a zero-length edge")
    if np.any(d_pred <= 0):
        raise DegenerateEdgeError("predicted geometry has a zero-length edge")
    return float(np.mean((np.log(d_pred) - np.log(d_target)) ** 2))


# ---------- generator ----------

def generator_losses(V_base, V_target_aligned) -> GeneratorTerms:
    Vb = center(_as_matrix(V_base, "V_base"))
    Vt = center(_as_matrix(V_target_aligned, "V_target_aligned"))
    if Vb.shape != Vt.shape:
        raise InvalidArgumentError(f"shape mismatch: {Vb.shape} vs {Vt.shape}")
    _, aligned = procrustes_align(Vb, Vt)
    align = float(np.sum((aligned - Vt) ** 2))
    gram_term = float(np.sum((gram(Vb) - gram(Vt)) ** 2))
    return GeneratorTerms(align=align, gram=gram_term)


def generator_scale_loss(V_base, V_target) -> float:
    """Optional log-RMS matching term for the generator proposal."""
    rms_b = float(np.sqrt(np.mean(center(_as_matrix(V_base, "V_base")) ** 2)))
    rms_t = float(np.sqrt(np.mean(center(_as_matrix(V_target, "V_target")) ** 2)))
    if rms_b <= 0 or rms_t <= 0:
        raise DegenerateTargetError("log-RMS needs nonzero geometries")
    return (np.log(rms_b) - np.log(rms_t)) ** 2


# ---------- overlap consistency ----------

def overlap_consistency(V1_I, V2_I) -> OverlapTerms:
    A = center(_as_matrix(V1_I, "V1_I"))
    B = center(_as_matrix(V2_I, "V2_I"))
    if A.shape[0] != B.shape[0]:
        raise InvalidArgumentError("both views must be restricted to the same shared set")
    if A.shape[0] < 2:
        raise InvalidArgumentError("overlap needs at least 2 shared points")
    G1, G2 = gram(A), gram(B)
    t1, t2 = float(np.trace(G1)), float(np.trace(G2))
    if t1 <= 0 or t2 <= 0:
        raise DegenerateOverlapError("overlap geometry has zero trace")
    shape = float(np.sum((G1 / t1 - G2 / t2) ** 2))
    scale = float((np.log(t1) - np.log(t2)) ** 2)
    return OverlapTerms(shape=shape, scale=scale)


def overlap_neighborhood_kl(V1_I, V2_I, tau: float) -> float:
    """Symmetric KL between the row softmaxes of -D^2/tau of the two views (self excluded)."""
    A = _as_matrix(V1_I, "V1_I")
    B = _as_matrix(V2_I, "V2_I")
    n = A.shape[0]
    if n < 3 or B.shape[0] != n:
        raise InvalidArgumentError("overlap KL needs at least 3 shared points in both views")
    off = ~np.eye(n, dtype=bool)
    la = np.where(off, -_squared_distances(A) / tau, -np.inf)
    lb = np.where(off, -_squared_distances(B) / tau, -np.inf)
    log_p = la - logsumexp(la, axis=1, keepdims=True)
    log_q = lb - logsumexp(lb, axis=1, keepdims=True)
    p, q = softmax(la, axis=1), softmax(lb, axis=1)
    diff = np.where(off, log_p - log_q, 0.0)
    return float(np.sum(p * diff) + np.sum(q * -diff))


# ---------- composite ----------

def loss_gate(sigma: float, sigma_gate: float = 1.0) -> bool:
    return sigma < sigma_gate


def geometry_losses(
    V_pred, V_target_aligned, sigma: float, cfg: LossConfig = LossConfig(),
    overlap: Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> Dict[str, float]:
    """
    Weighted Gram, log-trace, NCA and (given the two views restricted to their shared set)
    overlap terms on the composed prediction. Above the noise gate every term is switched
    off and only zeros are reported.
    """
    terms = {"gram": 0.0, "gram_scale": 0.0, "nca": 0.0, "overlap": 0.0}
    if loss_gate(sigma, cfg.sigma_gate):
        T = center(_as_matrix(V_target_aligned, "V_target_aligned"))
        G_target = gram(T)
        k = min(cfg.k_nca, T.shape[0] - 1)
        neighbors = knn_indices(T, k)
        terms["gram"] = gram_loss(V_pred, G_target)
        terms["gram_scale"] = gram_scale_loss(V_pred, G_target)
        terms["nca"] = nca_loss(V_pred, neighbors, cfg.tau_nca)
        if overlap is not None:
            V1_I, V2_I = overlap
            shape, scale = overlap_consistency(V1_I, V2_I)
            terms["overlap"] = shape + scale + overlap_neighborhood_kl(V1_I, V2_I, cfg.tau_nca)
    terms["total"] = (
        cfg.w_gram * terms["gram"] + cfg.w_gram_scale * terms["gram_scale"] + cfg.w_nca * terms["nca"]
        + cfg.w_overlap * terms["overlap"]
    )
    return terms
