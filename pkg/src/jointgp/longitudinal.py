"""Marginal multivariate-GP likelihood and latent-trajectory prediction.

Each subject carries a pooled grid of unique measurement times with one
observation mask per biomarker.  Unobserved entries are integrated out
exactly by selecting the observed rows/columns of the joint covariance.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .linalg_kron import (
    BiomarkerScale,
    NoiseSpec,
    NonPositiveDefiniteError,
    TemporalKernel,
    _as_R,
    cross_cov_dense,
    fast_logdet_solve,
    se_kernel,
)

__all__ = [
    "SubjectLongitudinal",
    "SubjectLongParams",
    "BiomarkerPrediction",
    "marginal_loglik",
    "predict_biomarkers",
    "predict_trajectory",
]

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(eq=False)
class SubjectLongitudinal:
    subject_id: str
    times: np.ndarray
    values1: np.ndarray
    values2: np.ndarray
    mask1: np.ndarray
    mask2: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        l = self.times.size
        self.values1 = np.asarray(self.values1, dtype=float).reshape(-1)
        self.values2 = np.asarray(self.values2, dtype=float).reshape(-1)
        self.mask1 = np.asarray(self.mask1, dtype=bool).reshape(-1)
        self.mask2 = np.asarray(self.mask2, dtype=bool).reshape(-1)
        if l < 1:
            raise ValueError(f"subject {self.subject_id}: needs at least one time")
        for arr in (self.values1, self.values2, self.mask1, self.mask2):
            if arr.size != l:
                raise ValueError(f"subject {self.subject_id}: length mismatch")
        if not np.all(np.isfinite(self.times)) or np.any(np.diff(self.times) <= 0):
            raise ValueError(
                f"subject {self.subject_id}: times must be finite and strictly increasing"
            )
        if not (self.mask1.any() or self.mask2.any()):
            raise ValueError(f"subject {self.subject_id}: no observed values")
        if not (
            np.all(np.isfinite(self.values1[self.mask1]))
            and np.all(np.isfinite(self.values2[self.mask2]))
        ):
            raise ValueError(f"subject {self.subject_id}: observed values must be finite")

    @property
    def n_times(self) -> int:
        return self.times.size

    @property
    def mask(self) -> np.ndarray:
        """Stacked biomarker-major observation mask of length ``2 l``."""
        return np.concatenate([self.mask1, self.mask2])

    @property
    def values(self) -> np.ndarray:
        return np.concatenate([self.values1, self.values2])

    @property
    def fully_observed(self) -> bool:
        return bool(self.mask1.all() and self.mask2.all())


@dataclass(frozen=True)
class SubjectLongParams:
    beta1_0: float
    beta2_0: float
    kappa2: float

    def __post_init__(self):
        if not (np.isfinite(self.kappa2) and self.kappa2 > 0):
            raise ValueError(f"kappa2 must be positive, got {self.kappa2!r}")

    @property
    def intercepts(self) -> np.ndarray:
        return np.array([self.beta1_0, self.beta2_0])


@dataclass(frozen=True)
class BiomarkerPrediction:
    mean: np.ndarray
    cov: np.ndarray


def _check_kernel(subj: SubjectLongitudinal, kernel: TemporalKernel):
    if kernel.size != subj.n_times or not np.array_equal(kernel.times, subj.times):
        raise ValueError(f"kernel was not built from subject {subj.subject_id}'s times")


def _observed_system(subj, p, R, kernel, noise):
    l = subj.n_times
    obs = subj.mask
    cov = cross_cov_dense(R, p.kappa2 * kernel.matrix, noise)[np.ix_(obs, obs)]
    resid = (subj.values - np.repeat(p.intercepts, l))[obs]
    return cov, resid


def marginal_loglik(
    subj: SubjectLongitudinal,
    p: SubjectLongParams,
    R,
    kernel: TemporalKernel,
    noise: NoiseSpec,
) -> float:
    """Log-density of the observed entries of ``X_i`` with the GP integrated out."""
    _check_kernel(subj, kernel)
    l = subj.n_times
    if subj.fully_observed:
        resid = subj.values - np.repeat(p.intercepts, l)
        logdet, sol = fast_logdet_solve(kernel, p.kappa2, R, noise, resid)
        n = 2 * l
    else:
        cov, resid = _observed_system(subj, p, R, kernel, noise)
        try:
            c = cho_factor(cov, lower=True)
        except np.linalg.LinAlgError as exc:
            raise NonPositiveDefiniteError(str(exc)) from None
        logdet = 2.0 * float(np.sum(np.log(np.diag(c[0]))))
        sol = cho_solve(c, resid)
        n = resid.size
    return -0.5 * (float(resid @ sol) + logdet + n * LOG_2PI)


def predict_trajectory(
    subj: SubjectLongitudinal,
    p: SubjectLongParams,
    R,
    kernel: TemporalKernel,
    noise: NoiseSpec,
    grid: Sequence[float],
) -> List[BiomarkerPrediction]:
    """Posterior of the noise-free latent biomarkers (plus intercepts) on a grid."""
    _check_kernel(subj, kernel)
    grid = np.atleast_1d(np.asarray(grid, dtype=float))
    Rm = _as_R(R)
    obs = subj.mask
    cov, resid = _observed_system(subj, p, R, kernel, noise)
    try:
        c = cho_factor(cov, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NonPositiveDefiniteError(str(exc)) from None
    k = p.kappa2 * se_kernel(grid, subj.times, kernel.rho2)  # (G, l)
    # cross-covariance rows for the two latent outputs at each grid time
    kstar = np.einsum("ab,gt->gabt", Rm, k).reshape(grid.size, 2, -1)[:, :, obs]
    alpha = cho_solve(c, resid)
    means = p.intercepts[None, :] + kstar @ alpha
    flat = kstar.transpose(2, 0, 1).reshape(resid.size, -1)
    v = cho_solve(c, flat).reshape(resid.size, grid.size, 2).transpose(1, 0, 2)
    covs = p.kappa2 * Rm[None] - kstar @ v
    covs = 0.5 * (covs + covs.transpose(0, 2, 1))
    out = []
    for g in range(grid.size):
        cv = covs[g]
        d = np.diag_indices(2)
        cv[d] = np.maximum(cv[d], 0.0)
        out.append(BiomarkerPrediction(mean=means[g], cov=cv))
    return out


def predict_biomarkers(
    subj: SubjectLongitudinal,
    p: SubjectLongParams,
    R,
    kernel: TemporalKernel,
    noise: NoiseSpec,
    t_star: float,
) -> BiomarkerPrediction:
    return predict_trajectory(subj, p, R, kernel, noise, [t_star])[0]
