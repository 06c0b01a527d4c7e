"""
EDM preconditioning, residual-diffusion targets and losses, curriculum noise sampling,
and a deterministic probability-flow sampler driven by a pluggable denoiser.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Literal, NamedTuple, Optional, Protocol, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import InvalidArgumentError, NumericalFailureError
from .geometry import _as_matrix, procrustes_align


class DiffusionConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    sigma_data: float = Field(1.0, gt=0)
    sigma_min: Optional[float] = Field(None, gt=0)
    sigma_max: Optional[float] = Field(None, gt=0)
    early_cap: Optional[float] = Field(None, gt=0)
    n_stages: int = Field(3, ge=1)
    steps: int = Field(600, ge=1)
    strata: int = Field(8, ge=1)
    schedule: Literal["loglinear", "karras"] = "loglinear"
    rho: float = Field(7.0, gt=0)

    @model_validator(mode="after")
    def _check_range(self) -> "DiffusionConfig":
        if not 0 < self.lo < self.hi:
            raise ValueError(f"need 0 < sigma_min < sigma_max, got {self.lo} and {self.hi}")
        return self

    @property
    def lo(self) -> float:
        return self.sigma_min if self.sigma_min is not None else 0.01 * self.sigma_data

    @property
    def hi(self) -> float:
        return self.sigma_max if self.sigma_max is not None else 3.0 * self.sigma_data


class Denoiser(Protocol):
    def __call__(self, noisy: np.ndarray, sigma: float, context: Any = None) -> np.ndarray: ...


class InnerNetwork(Protocol):
    def __call__(self, scaled: np.ndarray, c_noise: float, context: Any = None) -> np.ndarray: ...


class EDMCoefficients(NamedTuple):
    c_skip: float
    c_out: float
    c_in: float
    c_noise: float


@dataclass(frozen=True)
class NoiseSchedule:
    sigmas: np.ndarray

    def __post_init__(self) -> None:
        s = np.asarray(self.sigmas, dtype=float)
        if s.ndim != 1 or s.size < 1:
            raise InvalidArgumentError("a schedule needs at least one level")
        if np.any(s <= 0):
            raise InvalidArgumentError("noise levels must be positive")
        if np.any(np.diff(s) >= 0):
            raise InvalidArgumentError("noise levels must be strictly decreasing")
        s.setflags(write=False)
        object.__setattr__(self, "sigmas", s)

    def __len__(self) -> int:
        return int(self.sigmas.size)


# ---------- preconditioning ----------

def edm_coefficients(sigma: float, sigma_data: float) -> EDMCoefficients:
    if sigma <= 0 or sigma_data <= 0:
        raise InvalidArgumentError(f"sigma and sigma_data must be positive, got {sigma}, {sigma_data}")
    total = sigma**2 + sigma_data**2
    return EDMCoefficients(
        c_skip=sigma_data**2 / total,
        c_out=sigma * sigma_data / math.sqrt(total),
        c_in=1.0 / math.sqrt(total),
        c_noise=0.25 * math.log(sigma),
    )


def edm_loss_weight(sigma: float, sigma_data: float) -> float:
    if sigma <= 0 or sigma_data <= 0:
        raise InvalidArgumentError(f"sigma and sigma_data must be positive, got {sigma}, {sigma_data}")
    return (sigma**2 + sigma_data**2) / (sigma * sigma_data) ** 2


class PreconditionedDenoiser:
    """c_skip * x + c_out * F(c_in * x; c_noise) around an inner network F."""

    def __init__(self, network: InnerNetwork, sigma_data: float) -> None:
        self.network = network
        self.sigma_data = sigma_data

    def __call__(self, noisy: np.ndarray, sigma: float, context: Any = None) -> np.ndarray:
        c = edm_coefficients(sigma, self.sigma_data)
        return c.c_skip * noisy + c.c_out * self.network(c.c_in * noisy, c.c_noise, context)


# ---------- analytic denoisers ----------

class OracleDenoiser:
    def __init__(self, clean: np.ndarray) -> None:
        self.clean = np.asarray(clean, dtype=float)

    def __call__(self, noisy: np.ndarray, sigma: float, context: Any = None) -> np.ndarray:
        return np.broadcast_to(self.clean, np.shape(noisy)).copy()


class IdentityDenoiser:
    def __call__(self, noisy: np.ndarray, sigma: float, context: Any = None) -> np.ndarray:
        return np.array(noisy, dtype=float)


class GaussianDenoiser:
    """Posterior mean E[x0 | x] = (s^2 x + sigma^2 mu) / (s^2 + sigma^2) for the prior N(mu, s^2 I)."""

    def __init__(self, mu, s: float) -> None:
        self.mu = np.asarray(mu, dtype=float)
        self.s = float(s)

    def __call__(self, noisy: np.ndarray, sigma: float, context: Any = None) -> np.ndarray:
        s2 = self.s**2
        return (s2 * noisy + sigma**2 * self.mu) / (s2 + sigma**2)


class GaussianInnerNetwork:
    """Inner network whose preconditioned output is the Gaussian posterior mean."""

    def __init__(self, mu, s: float, sigma_data: float) -> None:
        self.posterior = GaussianDenoiser(mu, s)
        self.sigma_data = sigma_data

    def __call__(self, scaled: np.ndarray, c_noise: float, context: Any = None) -> np.ndarray:
        sigma = math.exp(4.0 * c_noise)
        c = edm_coefficients(sigma, self.sigma_data)
        noisy = scaled / c.c_in
        return (self.posterior(noisy, sigma) - c.c_skip * noisy) / c.c_out


# ---------- residual mode ----------

def residual_target(V_target, V_base) -> Tuple[np.ndarray, np.ndarray]:
    """Aligns the target to the proposal's frame in O(d); returns (V_target_aligned, R_target)."""
    Vt = _as_matrix(V_target, "V_target")
    Vb = _as_matrix(V_base, "V_base")
    if Vt.shape != Vb.shape:
        raise InvalidArgumentError(f"shape mismatch: {Vt.shape} vs {Vb.shape}")
    _, aligned = procrustes_align(Vt, Vb)
    Vb = Vb - Vb.mean(axis=0, keepdims=True)
    return aligned, aligned - Vb


def score_loss(
    R_target,
    sigma: float,
    noise,
    denoiser: Denoiser,
    sigma_data: float,
    mask=None,
    context: Any = None,
) -> float:
    R = _as_matrix(R_target, "R_target")
    eps = np.asarray(noise, dtype=float)
    if eps.shape != R.shape:
        raise InvalidArgumentError(f"noise shape {eps.shape} differs from target {R.shape}")
    R_hat = denoiser(R + sigma * eps, sigma, context)
    err = R_hat - R
    if mask is not None:
        m = np.asarray(mask, dtype=float).reshape(-1, 1)
        err = err * m
    return edm_loss_weight(sigma, sigma_data) * float(np.sum(err**2))


# ---------- curriculum ----------

def sigma_cap(stage: int, cfg: DiffusionConfig) -> float:
    if not 1 <= stage <= cfg.n_stages:
        raise InvalidArgumentError(f"stage {stage} outside 1..{cfg.n_stages}")
    if cfg.n_stages == 1:
        return cfg.hi
    early = cfg.early_cap if cfg.early_cap is not None else math.sqrt(cfg.lo * cfg.hi)
    t = (stage - 1) / (cfg.n_stages - 1)
    if stage == cfg.n_stages:
        return cfg.hi
    return math.exp(math.log(early) + t * (math.log(cfg.hi) - math.log(early)))


def sample_sigma(stage: int, cfg: DiffusionConfig, rng: np.random.Generator, stratum: Optional[int] = None) -> float:
    """Log-uniform on [sigma_min, sigma_cap(stage)], optionally restricted to one of cfg.strata log-strata."""
    lo, hi = math.log(cfg.lo), math.log(sigma_cap(stage, cfg))
    u = rng.random()
    if stratum is not None:
        if not 0 <= stratum < cfg.strata:
            raise InvalidArgumentError(f"stratum {stratum} outside 0..{cfg.strata - 1}")
        u = (stratum + u) / cfg.strata
    return math.exp(lo + u * (hi - lo))


class StratifiedSigmaSampler:
    """Every consecutive block of cfg.strata draws hits each log-stratum exactly once."""

    def __init__(self, cfg: DiffusionConfig, rng: np.random.Generator) -> None:
        self.cfg = cfg
        self.rng = rng
        self._queue: list[int] = []

    def draw(self, stage: int) -> float:
        if not self._queue:
            self._queue = self.rng.permutation(self.cfg.strata).tolist()
        return sample_sigma(stage, self.cfg, self.rng, stratum=self._queue.pop())

    def draw_batch(self, stage: int, count: int) -> np.ndarray:
        return np.array([self.draw(stage) for _ in range(count)])


# ---------- sampling ----------

def make_schedule(cfg: DiffusionConfig) -> NoiseSchedule:
    L = cfg.steps
    if L == 1:
        return NoiseSchedule(np.array([cfg.hi]))
    if cfg.schedule == "karras":
        ramp = np.linspace(0.0, 1.0, L)
        inv = 1.0 / cfg.rho
        sig = (cfg.hi**inv + ramp * (cfg.lo**inv - cfg.hi**inv)) ** cfg.rho
    else:
        sig = np.geomspace(cfg.hi, cfg.lo, L)
    sig[0], sig[-1] = cfg.hi, cfg.lo
    return NoiseSchedule(sig)


def sample_residual(
    V_base,
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    initial: Optional[np.ndarray] = None,
    context: Any = None,
) -> np.ndarray:
    """
    First-order probability-flow Euler from sigma_1 down to sigma_L, no churn.
    Returns V_base plus the denoised residual at the last level.
    """
    Vb = _as_matrix(V_base, "V_base")
    sigmas = schedule.sigmas
    if initial is None:
        R = rng.standard_normal(Vb.shape) * sigmas[0]
    else:
        R = np.array(initial, dtype=float)
        if R.shape != Vb.shape:
            raise InvalidArgumentError(f"initial residual shape {R.shape} differs from {Vb.shape}")

    def _denoise(x: np.ndarray, sigma: float) -> np.ndarray:
        out = np.asarray(denoiser(x, sigma, context), dtype=float)
        if out.shape != x.shape:
            raise NumericalFailureError(f"denoiser returned shape {out.shape} for input {x.shape}")
        if not np.all(np.isfinite(out)):
            raise NumericalFailureError(f"denoiser produced non-finite output at sigma={sigma:.4g}")
        return out

    for cur, nxt in zip(sigmas[:-1], sigmas[1:]):
        d = (R - _denoise(R, cur)) / cur
        R = R + (nxt - cur) * d
    return Vb + _denoise(R, sigmas[-1])
