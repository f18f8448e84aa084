"""Separable (Kronecker) cross-covariance algebra for two-biomarker GPs.

Vectors are stacked biomarker-major: ``[x1(t_1..t_l), x2(t_1..t_l)]``, so the
joint covariance of a subject is ``R kron (kappa2 * K) + diag(sigma2_k * I_l)``.

The fast path rotates by ``I_q kron U`` where ``K = U diag(lam) U^T``.  Each
eigenvalue then owns an independent q x q block
``kappa2 * lam_j * R + diag(sigma2)``, which is exact for any per-biomarker
noise (the blocks never need the noise to commute with R).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Tuple

import numpy as np
from scipy.linalg import cho_solve

__all__ = [
    "NonPositiveDefiniteError",
    "TemporalKernel",
    "BiomarkerScale",
    "NoiseSpec",
    "temporal_kernel",
    "se_kernel",
    "build_R",
    "cross_cov_dense",
    "fast_logdet_solve",
    "dense_logdet_solve",
]

EIG_CLAMP_TOL = 1e-10
SYMMETRY_TOL = 1e-9


class NonPositiveDefiniteError(np.linalg.LinAlgError):
    """Raised when a covariance (or one of its eigen-blocks) is not PD."""


def se_kernel(t1, t2, rho2: float) -> np.ndarray:
    """Squared-exponential correlation ``exp(-rho2 * (t1 - t2)**2)``."""
    t1 = np.asarray(t1, dtype=float)
    t2 = np.asarray(t2, dtype=float)
    return np.exp(-rho2 * np.subtract.outer(t1, t2) ** 2)


@dataclass(frozen=True, eq=False)
class TemporalKernel:
    """Unit-diagonal temporal correlation matrix with a cached eigendecomposition.

    Eigenvalues are stored in descending order and clamped at zero; tiny
    negative round-off (down to ``-1e-10`` relative to the largest eigenvalue)
    is tolerated, anything more negative is rejected.
    """

    times: np.ndarray
    rho2: float
    matrix: np.ndarray = field(repr=False)

    def __post_init__(self):
        m = self.matrix
        if m.shape != (self.times.size, self.times.size):
            raise ValueError("kernel matrix does not match the number of times")
        if self.times.size and np.max(np.abs(m - m.T)) > SYMMETRY_TOL:
            raise ValueError("kernel matrix is not symmetric")

    @cached_property
    def eig(self) -> Tuple[np.ndarray, np.ndarray]:
        """``(lam, U)`` with ``lam`` descending and ``U`` orthogonal."""
        lam, U = np.linalg.eigh(self.matrix)
        lam = lam[::-1].copy()
        U = U[:, ::-1].copy()
        scale = max(1.0, float(lam[0])) if lam.size else 1.0
        if lam.size and lam[-1] < -EIG_CLAMP_TOL * scale:
            raise ValueError(
                f"kernel matrix has a negative eigenvalue {lam[-1]:.3e}"
            )
        np.clip(lam, 0.0, None, out=lam)
        lam.setflags(write=False)
        U.setflags(write=False)
        return lam, U

    @property
    def size(self) -> int:
        return int(self.times.size)


def temporal_kernel(times, rho2: float, eager: bool = True) -> TemporalKernel:
    """Build ``K[j, j'] = exp(-rho2 (t_j - t_j')^2)`` for the given times.

    ``eager=False`` defers the eigendecomposition until the fast path first
    asks for it; results are identical either way.
    """
    t = np.array(times, dtype=float).reshape(-1)
    if not np.all(np.isfinite(t)):
        raise ValueError("times must be finite")
    if not (np.isfinite(rho2) and rho2 > 0):
        raise ValueError(f"rho2 must be a positive finite scalar, got {rho2!r}")
    t.setflags(write=False)
    mat = se_kernel(t, t, float(rho2))
    mat.setflags(write=False)
    kern = TemporalKernel(times=t, rho2=float(rho2), matrix=mat)
    if eager:
        kern.eig  # noqa: B018 - populate cache
    return kern


@dataclass(frozen=True)
class BiomarkerScale:
    """Between-biomarker covariance ``R = tau Omega tau`` with ``tau = diag(1, tau2)``."""

    tau2: float
    corr: float

    @cached_property
    def R(self) -> np.ndarray:
        t = np.array([1.0, self.tau2])
        omega = np.array([[1.0, self.corr], [self.corr, 1.0]])
        r = t[:, None] * omega * t[None, :]
        r.setflags(write=False)
        return r


def build_R(tau2: float, corr: float) -> BiomarkerScale:
    if not (np.isfinite(tau2) and tau2 > 0):
        raise ValueError(f"tau2 must be positive, got {tau2!r}")
    if not (np.isfinite(corr) and abs(corr) < 1):
        raise ValueError(f"corr must lie in (-1, 1), got {corr!r}")
    return BiomarkerScale(float(tau2), float(corr))


@dataclass(frozen=True)
class NoiseSpec:
    sigma2_1: float
    sigma2_2: float

    def __post_init__(self):
        for name in ("sigma2_1", "sigma2_2"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be nonnegative, got {v!r}")

    @property
    def variances(self) -> np.ndarray:
        return np.array([self.sigma2_1, self.sigma2_2])


def _as_R(R) -> np.ndarray:
    return np.asarray(R.R if isinstance(R, BiomarkerScale) else R, dtype=float)


def _as_noise(noise) -> np.ndarray:
    if isinstance(noise, NoiseSpec):
        return noise.variances
    return np.asarray(noise, dtype=float).reshape(-1)


def cross_cov_dense(R, S, noise) -> np.ndarray:
    """Full ``(q l) x (q l)`` covariance ``R kron S + blockdiag(sigma2_k I_l)``.

    ``S`` is the already-scaled temporal matrix ``kappa2 * K``.
    """
    Rm = _as_R(R)
    S = np.asarray(S, dtype=float)
    s2 = _as_noise(noise)
    if Rm.shape[0] != s2.size:
        raise ValueError("noise must have one variance per biomarker")
    cov = np.kron(Rm, S)
    cov[np.diag_indices_from(cov)] += np.repeat(s2, S.shape[0])
    return cov


def dense_logdet_solve(
    cov, rhs: Optional[np.ndarray] = None
) -> Tuple[float, Optional[np.ndarray]]:
    """Cholesky log-determinant and (optionally) solve ``cov x = rhs``."""
    cov = np.asarray(cov, dtype=float)
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise NonPositiveDefiniteError(str(exc)) from None
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    if rhs is None:
        return logdet, None
    return logdet, cho_solve((L, True), np.asarray(rhs, dtype=float))


def fast_logdet_solve(
    kernel: TemporalKernel,
    kappa2: float,
    R,
    noise,
    rhs: Optional[np.ndarray] = None,
) -> Tuple[float, Optional[np.ndarray]]:
    """Exact ``log|R kron kappa2 K + Sigma_eps|`` and solve via eigen-blocks.

    After the cached eigendecomposition of ``K`` this costs O(l) small q x q
    factorizations plus two rotations by ``U``.
    """
    if not (np.isfinite(kappa2) and kappa2 >= 0):
        raise ValueError(f"kappa2 must be nonnegative, got {kappa2!r}")
    Rm = _as_R(R)
    s2 = _as_noise(noise)
    q = Rm.shape[0]
    lam, U = kernel.eig
    l = lam.size
    blocks = kappa2 * lam[:, None, None] * Rm[None, :, :] + np.diag(s2)[None]
    sign, logdets = np.linalg.slogdet(blocks)
    bad = np.flatnonzero((sign <= 0) | ~np.isfinite(logdets))
    if bad.size:
        raise NonPositiveDefiniteError(
            f"eigen-block {int(bad[0])} (eigenvalue {lam[bad[0]]:.3e}) is not positive definite"
        )
    # positive det with a negative pivot means both eigenvalues are negative (q=2)
    if np.any(blocks[:, 0, 0] <= 0):
        j = int(np.flatnonzero(blocks[:, 0, 0] <= 0)[0])
        raise NonPositiveDefiniteError(
            f"eigen-block {j} (eigenvalue {lam[j]:.3e}) is not positive definite"
        )
    logdet = float(np.sum(logdets))
    if rhs is None:
        return logdet, None
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape[0] != q * l:
        raise ValueError(f"rhs must have length {q * l}")
    # rows: biomarker, cols: time -> rotate time axis
    rot = rhs.reshape(q, l, *rhs.shape[1:])
    rot = np.einsum("tj,qt...->jq...", U, rot)
    sol = np.linalg.solve(blocks, rot if rot.ndim > 2 else rot[..., None])
    if rot.ndim == 2:
        sol = sol[..., 0]
    back = np.einsum("tj,jq...->qt...", U, sol)
    return logdet, back.reshape(rhs.shape)
