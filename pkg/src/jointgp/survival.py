"""Weibull proportional-hazards likelihood with time-varying covariates and
the truncated stick-breaking DP mixture prior on baseline intercepts.

Hazard: ``h(t) = nu * t**(nu - 1) * exp(lambda(t))``.  With a constant
``lambda`` this gives the density ``nu t^(nu-1) exp(lambda - e^lambda t^nu)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import betaln, logsumexp

__all__ = [
    "SurvivalRecord",
    "SurvParams",
    "DPMixture",
    "hazard",
    "cumulative_hazard",
    "survival_loglik",
    "stick_to_weights",
    "dp_logprior",
    "make_lambda_fn",
]

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(eq=False)
class SurvivalRecord:
    subject_id: str
    time: float
    event: int
    z_baseline: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.time = float(self.time)
        self.z_baseline = np.asarray(self.z_baseline, dtype=float).reshape(-1)
        if not (np.isfinite(self.time) and self.time > 0):
            raise ValueError(f"subject {self.subject_id}: time must be > 0")
        if self.event not in (0, 1, True, False):
            raise ValueError(f"subject {self.subject_id}: event must be 0 or 1")
        self.event = int(self.event)
        if not np.all(np.isfinite(self.z_baseline)):
            raise ValueError(f"subject {self.subject_id}: covariates must be finite")


@dataclass
class SurvParams:
    nu: float
    beta_s0: np.ndarray
    zeta_s: np.ndarray
    zeta_x1: float
    zeta_x2: float

    def __post_init__(self):
        self.beta_s0 = np.asarray(self.beta_s0, dtype=float).reshape(-1)
        self.zeta_s = np.asarray(self.zeta_s, dtype=float).reshape(-1)
        if not (np.isfinite(self.nu) and self.nu > 0):
            raise ValueError(f"nu must be positive, got {self.nu!r}")


def stick_to_weights(sticks: Sequence[float]) -> np.ndarray:
    """Truncated stick-breaking; the last weight takes what the sticks leave."""
    v = np.asarray(sticks, dtype=float).reshape(-1)
    if np.any(~(v > 0) | ~(v < 1)):
        raise ValueError("stick fractions must lie in (0, 1)")
    remain = np.concatenate([[1.0], np.cumprod(1.0 - v)])
    return np.concatenate([v, [1.0]]) * remain


@dataclass
class DPMixture:
    sticks: np.ndarray
    locations: np.ndarray
    alpha: float
    sigma2_b0: float = 1.0
    base_mean: float = 0.0
    base_var: float = 1.0

    def __post_init__(self):
        self.sticks = np.asarray(self.sticks, dtype=float).reshape(-1)
        self.locations = np.asarray(self.locations, dtype=float).reshape(-1)
        if self.locations.size != self.sticks.size + 1:
            raise ValueError("need exactly K - 1 sticks for K locations")
        if not np.all(np.isfinite(self.locations)):
            raise ValueError("locations must be finite")
        if not (self.alpha > 0 and self.sigma2_b0 > 0 and self.base_var > 0):
            raise ValueError("alpha, sigma2_b0 and base_var must be positive")

    @property
    def K(self) -> int:
        return self.locations.size

    @property
    def weights(self) -> np.ndarray:
        return stick_to_weights(self.sticks)


def _norm_logpdf(x, mean, var):
    return -0.5 * (LOG_2PI + np.log(var) + (x - mean) ** 2 / var)


def dp_logprior(beta_s0, mix: DPMixture) -> float:
    """Mixture log-density of the intercepts (labels summed out) plus the
    Beta(1, alpha) stick terms and the base-measure terms for the locations."""
    b = np.asarray(beta_s0, dtype=float).reshape(-1)
    logw = np.log(mix.weights)
    comp = logw[None, :] + _norm_logpdf(b[:, None], mix.locations[None, :], mix.sigma2_b0)
    total = float(np.sum(logsumexp(comp, axis=1)))
    v = mix.sticks
    total += float(np.sum((mix.alpha - 1.0) * np.log1p(-v) - betaln(1.0, mix.alpha)))
    total += float(np.sum(_norm_logpdf(mix.locations, mix.base_mean, mix.base_var)))
    return total


def hazard(t, nu: float, lambda_t):
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise ValueError("hazard requires t > 0")
    if not nu > 0:
        raise ValueError("nu must be positive")
    return nu * t ** (nu - 1.0) * np.exp(lambda_t)


def _midpoints(upper: float, m: int) -> np.ndarray:
    return (np.arange(m) + 0.5) * (upper / m)


def cumulative_hazard(
    record: SurvivalRecord, lambda_fn: Callable, nu: float, m: int = 25
) -> float:
    """Midpoint-rule ``int_0^Y nu w^(nu-1) exp(lambda(w)) dw`` on ``m`` cells."""
    if m < 1:
        raise ValueError("m must be >= 1")
    w = _midpoints(record.time, m)
    lam = np.broadcast_to(np.asarray(lambda_fn(w), dtype=float), w.shape)
    return float(np.sum(hazard(w, nu, lam)) * record.time / m)


def survival_loglik(
    record: SurvivalRecord, p: SurvParams, lambda_fn: Callable, m: int = 25
) -> float:
    """``delta * log h(Y) - H(Y)``."""
    H = cumulative_hazard(record, lambda_fn, p.nu, m)
    out = -H
    if record.event:
        lam_y = float(np.asarray(lambda_fn(np.array([record.time])), dtype=float).reshape(-1)[0])
        out += np.log(p.nu) + (p.nu - 1.0) * np.log(record.time) + lam_y
    return float(out)


def make_lambda_fn(p: SurvParams, index: int, z, biomarker_mean: Callable) -> Callable:
    """``lambda_i(t) = beta_s0[i] + zeta_s . z + zeta_x . E[X(t)]``.

    ``biomarker_mean(t)`` returns an ``(len(t), 2)`` array of predicted
    latent biomarker values.
    """
    base = float(p.beta_s0[index]) + float(np.dot(p.zeta_s, np.asarray(z, dtype=float)))
    zx = np.array([p.zeta_x1, p.zeta_x2])

    def lam(t):
        mu = np.asarray(biomarker_mean(np.atleast_1d(t)), dtype=float)
        return base + mu @ zx

    return lam
