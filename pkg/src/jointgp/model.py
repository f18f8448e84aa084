"""Joint log-posterior over an unconstrained parameter vector.

The per-subject algebra mirrors :mod:`jointgp.longitudinal` and
:mod:`jointgp.survival` but is batched over subjects in JAX so that HMC gets
exact gradients.  Missing entries are handled by replacing their rows and
columns of the covariance with the identity and zeroing their residuals;
the Gaussian log-density then equals the density of the observed sub-vector.

Two longitudinal modes share all the machinery:

* ``multi``: per-subject scale ``kappa2_i * R`` with ``R = tau Omega tau``.
* ``uni``: correlation pinned at 0 and separate ``kappa2`` per biomarker, so
  the two biomarkers are independent GPs.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from functools import partial
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import jax

jax.config.update("jax_enable_x64", True)

import jax.numpy as jnp  # noqa: E402
import numpy as np  # noqa: E402
from jax.scipy.linalg import cho_solve  # noqa: E402
from jax.scipy.special import betaln, gammaln, logsumexp  # noqa: E402

from .linalg_kron import se_kernel  # noqa: E402
from .longitudinal import SubjectLongitudinal  # noqa: E402
from .survival import SurvivalRecord  # noqa: E402

__all__ = [
    "Priors",
    "ModelSpec",
    "JointParams",
    "UnconstrainedVector",
    "JointModel",
    "pack",
    "unpack",
    "log_prior",
    "log_posterior",
    "grad_log_posterior",
]

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class Priors:
    """Hyperprior constants.  Log-normal pairs are ``(meanlog, sdlog)``;
    Normal priors are given by mean and variance."""

    beta_mean: Tuple[float, float] = (5.0, 20.0)
    beta_var: Tuple[float, float] = (4.0, 25.0)
    sigma2_lognormal: Tuple[float, float] = (-1.0, 1.0)
    kappa2_lognormal: Tuple[float, float] = (-1.0, 2.0)
    tau2_cauchy_scale: float = 2.5
    lkj_eta: float = 1.0
    nu_lognormal: Tuple[float, float] = (0.0, 1.0)
    zeta_var: float = 25.0
    alpha_gamma: Tuple[float, float] = (3.0, 3.0)  # shape, rate
    base_mean: float = 0.0
    base_var: float = 1.0
    sigma2_b0: float = 1.0


@dataclass(frozen=True)
class ModelSpec:
    mode: str = "multi"
    survival: bool = True
    n_components: int = 20
    n_grid: int = 25
    rho2: float = 0.1
    priors: Priors = field(default_factory=Priors)

    def __post_init__(self):
        if self.mode not in ("multi", "uni"):
            raise ValueError(f"mode must be 'multi' or 'uni', got {self.mode!r}")
        if self.n_components < 1 or self.n_grid < 1:
            raise ValueError("n_components and n_grid must be >= 1")
        if not self.rho2 > 0:
            raise ValueError("rho2 must be positive")


@dataclass
class JointParams:
    """Constrained parameter state.  ``kappa2`` is ``(n,)`` in multi mode and
    ``(n, 2)`` in uni mode; survival fields are ``None`` without survival."""

    beta1: np.ndarray
    beta2: np.ndarray
    kappa2: np.ndarray
    sigma2: np.ndarray
    tau2: float
    corr: float = 0.0
    beta_s0: Optional[np.ndarray] = None
    nu: Optional[float] = None
    zeta_s: Optional[np.ndarray] = None
    zeta_x: Optional[np.ndarray] = None
    sticks: Optional[np.ndarray] = None
    locations: Optional[np.ndarray] = None
    alpha: Optional[float] = None

    @property
    def zeta_x1(self) -> float:
        return float(self.zeta_x[0])

    @property
    def zeta_x2(self) -> float:
        return float(self.zeta_x[1])

    def as_dict(self) -> Dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self) if getattr(self, f.name) is not None}


# block name -> (constrained name, transform)
_TRANSFORMS = {
    "beta1": ("beta1", "identity"),
    "beta2": ("beta2", "identity"),
    "log_kappa2": ("kappa2", "log"),
    "log_sigma2": ("sigma2", "log"),
    "log_tau2": ("tau2", "log"),
    "atanh_corr": ("corr", "atanh"),
    "beta_s0": ("beta_s0", "identity"),
    "log_nu": ("nu", "log"),
    "zeta_s": ("zeta_s", "identity"),
    "zeta_x": ("zeta_x", "identity"),
    "logit_sticks": ("sticks", "logit"),
    "locations": ("locations", "identity"),
    "log_alpha": ("alpha", "log"),
}


@dataclass(frozen=True)
class Layout:
    blocks: Tuple[Tuple[str, Tuple[int, ...]], ...]

    @property
    def offsets(self) -> Dict[str, slice]:
        out, start = {}, 0
        for name, shape in self.blocks:
            size = int(np.prod(shape)) if shape else 1
            out[name] = slice(start, start + size)
            start += size
        return out

    @property
    def size(self) -> int:
        return sum(int(np.prod(s)) if s else 1 for _, s in self.blocks)

    def split(self, theta):
        return {
            name: theta[sl].reshape(shape)
            for (name, shape), sl in zip(self.blocks, self.offsets.values())
        }


def make_layout(spec: ModelSpec, n: int, n_z: int) -> Layout:
    blocks = [("beta1", (n,)), ("beta2", (n,))]
    blocks.append(("log_kappa2", (n,) if spec.mode == "multi" else (n, 2)))
    blocks += [("log_sigma2", (2,)), ("log_tau2", ())]
    if spec.mode == "multi":
        blocks.append(("atanh_corr", ()))
    if spec.survival:
        K = spec.n_components
        blocks += [
            ("beta_s0", (n,)),
            ("log_nu", ()),
            ("zeta_s", (n_z,)),
            ("zeta_x", (2,)),
            ("logit_sticks", (K - 1,)),
            ("locations", (K,)),
            ("log_alpha", ()),
        ]
    return Layout(tuple(blocks))


@dataclass(frozen=True)
class UnconstrainedVector:
    theta: np.ndarray
    layout: Layout

    def __post_init__(self):
        if self.theta.shape != (self.layout.size,):
            raise ValueError("theta length does not match layout")
        if not np.all(np.isfinite(self.theta)):
            raise ValueError("theta must be finite")


def _constrain(raw: Dict[str, jnp.ndarray]):
    """Map unconstrained blocks to constrained values and the log-Jacobian."""
    out, logjac = {}, 0.0
    for name, u in raw.items():
        target, kind = _TRANSFORMS[name]
        if kind == "identity":
            out[target] = u
        elif kind == "log":
            out[target] = jnp.exp(u)
            logjac = logjac + jnp.sum(u)
        elif kind == "atanh":
            out[target] = jnp.tanh(u)
            # log(1 - tanh(u)^2), written to stay finite for large |u|
            logjac = logjac + jnp.sum(2.0 * (jnp.log(2.0) - jnp.abs(u) - jnp.log1p(jnp.exp(-2.0 * jnp.abs(u)))))
        elif kind == "logit":
            out[target] = jax.nn.sigmoid(u)
            logjac = logjac + jnp.sum(jax.nn.log_sigmoid(u) + jax.nn.log_sigmoid(-u))
    return out, logjac


def _shift(c, centre):
    return centre[0] * c["nu"] + jnp.dot(centre[1:3], c["zeta_x"]) + jnp.dot(centre[3:], c["zeta_s"])


def _constrain_data(raw, data):
    """:func:`_constrain` plus the survival centring.

    The sampler sees ``beta_s0 + shift`` and ``locations + shift`` with
    ``shift = nu * mean(log Y) + zeta . (covariate means)``.  This
    unit-Jacobian shear leaves the density unchanged but removes the strong
    coupling between the intercepts and the shape and coefficients.
    """
    c, logjac = _constrain(raw)
    if "beta_s0" in c:
        sh = _shift(c, data.centre)
        c["beta_s0"] = c["beta_s0"] - sh
        c["locations"] = c["locations"] - sh
    return c, logjac


def _unconstrain_value(kind: str, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if kind == "identity":
        return x
    if kind == "log":
        return np.log(x)
    if kind == "atanh":
        return np.arctanh(x)
    return np.log(x) - np.log1p(-x)


# ---------------------------------------------------------------- priors

def _normal_lp(x, mean, var):
    return -0.5 * (LOG_2PI + jnp.log(var) + (x - mean) ** 2 / var)


def _lognormal_lp(x, meanlog, sdlog):
    lx = jnp.log(x)
    return -lx - jnp.log(sdlog) - 0.5 * LOG_2PI - 0.5 * ((lx - meanlog) / sdlog) ** 2


def _dp_terms(c, pr: Priors):
    """Mixture density of beta_s0 plus stick and base-measure terms."""
    v = c["sticks"]
    loc = c["locations"]
    alpha = c["alpha"]
    log_v = jnp.log(v)
    log_1mv = jnp.log1p(-v)
    csum = jnp.concatenate([jnp.zeros(1), jnp.cumsum(log_1mv)])
    logw = jnp.concatenate([log_v, jnp.zeros(1)]) + csum
    comp = logw[None, :] + _normal_lp(c["beta_s0"][:, None], loc[None, :], pr.sigma2_b0)
    lp = jnp.sum(logsumexp(comp, axis=1))
    lp = lp + jnp.sum((alpha - 1.0) * log_1mv - betaln(1.0, alpha))
    lp = lp + jnp.sum(_normal_lp(loc, pr.base_mean, pr.base_var))
    return lp


def _log_prior_c(c, spec: ModelSpec):
    pr = spec.priors
    lp = jnp.sum(_normal_lp(c["beta1"], pr.beta_mean[0], pr.beta_var[0]))
    lp += jnp.sum(_normal_lp(c["beta2"], pr.beta_mean[1], pr.beta_var[1]))
    lp += jnp.sum(_lognormal_lp(c["kappa2"], *pr.kappa2_lognormal))
    lp += jnp.sum(_lognormal_lp(c["sigma2"], *pr.sigma2_lognormal))
    s = pr.tau2_cauchy_scale
    lp += jnp.log(2.0 / (jnp.pi * s)) - jnp.log1p((c["tau2"] / s) ** 2)
    if spec.mode == "multi":
        eta = pr.lkj_eta
        lp += (eta - 1.0) * jnp.log1p(-c["corr"] ** 2) - (
            (2.0 * eta - 1.0) * jnp.log(2.0) + betaln(eta, eta)
        )
    if spec.survival:
        lp += _lognormal_lp(c["nu"], *pr.nu_lognormal)
        lp += jnp.sum(_normal_lp(c["zeta_s"], 0.0, pr.zeta_var))
        lp += jnp.sum(_normal_lp(c["zeta_x"], 0.0, pr.zeta_var))
        a, b = pr.alpha_gamma
        alpha = c["alpha"]
        lp += a * jnp.log(b) - gammaln(a) + (a - 1.0) * jnp.log(alpha) - b * alpha
        lp += _dp_terms(c, pr)
    return lp


# ---------------------------------------------------------------- data

class PackedData(NamedTuple):
    times: jnp.ndarray  # (n, L)
    K: jnp.ndarray  # (n, L, L)
    x: jnp.ndarray  # (n, 2L), zero where unobserved
    mask: jnp.ndarray  # (n, 2L) float 0/1
    n_obs: jnp.ndarray  # (n,)
    U: jnp.ndarray  # (n, L, L) kernel eigenvectors
    lam: jnp.ndarray  # (n, L) kernel eigenvalues
    y: jnp.ndarray  # (n,)
    event: jnp.ndarray  # (n,)
    z: jnp.ndarray  # (n, p)
    log_y: jnp.ndarray  # (n,)
    log_w: jnp.ndarray  # (n, m) log midpoints
    kq: jnp.ndarray  # (n, m + 1, L) kernel between (midpoints, Y) and obs times
    centre: jnp.ndarray  # (3 + p,) mean log Y, biomarker means, z means
    E: jnp.ndarray  # (n, 2, L, M) rotated unit vectors of unobserved entries
    miss_valid: jnp.ndarray  # (n, M) float 0/1, 0 on padding


def _pack_subjects(
    subjects: Sequence[SubjectLongitudinal],
    records: Optional[Sequence[SurvivalRecord]],
    spec: ModelSpec,
):
    n = len(subjects)
    L = max(s.n_times for s in subjects)
    times = np.zeros((n, L))
    K = np.tile(np.eye(L), (n, 1, 1))
    x = np.zeros((n, 2 * L))
    mask = np.zeros((n, 2 * L))
    for i, s in enumerate(subjects):
        l = s.n_times
        times[i, :l] = s.times
        times[i, l:] = s.times[-1]
        K[i, :l, :l] = se_kernel(s.times, s.times, spec.rho2)
        for b, (vals, m) in enumerate(((s.values1, s.mask1), (s.values2, s.mask2))):
            x[i, b * L : b * L + l] = np.where(m, np.nan_to_num(vals), 0.0)
            mask[i, b * L : b * L + l] = m
    fast = bool(mask.all())
    lam, U = np.linalg.eigh(K)
    lam = np.clip(lam, 0.0, None)
    m = spec.n_grid
    if spec.survival:
        if records is None:
            raise ValueError("survival model requires survival records")
        y = np.array([r.time for r in records])
        event = np.array([r.event for r in records], dtype=float)
        z = np.array([r.z_baseline for r in records], dtype=float).reshape(n, -1)
        w = (np.arange(m) + 0.5)[None, :] * (y[:, None] / m)
        query = np.concatenate([w, y[:, None]], axis=1)
        kq = np.exp(-spec.rho2 * (query[:, :, None] - times[:, None, :]) ** 2)
        log_w = np.log(w)
        log_y = np.log(y)
    else:
        y = event = log_y = np.zeros(n)
        z = np.zeros((n, 0))
        log_w = np.zeros((n, 0))
        kq = np.zeros((n, 0, L))
    centre = np.concatenate(
        [[log_y.mean() if spec.survival else 0.0],
         [x[:, b * L : (b + 1) * L][mask[:, b * L : (b + 1) * L] > 0].mean() if mask[:, b * L : (b + 1) * L].any() else 0.0 for b in range(2)],
         z.mean(axis=0) if n else np.zeros(z.shape[1])]
    )
    # unobserved entries, including time padding, are marginalized out
    M = max(1, int((mask == 0).sum(axis=1).max()))
    E = np.zeros((n, 2, L, M))
    miss_valid = np.zeros((n, M))
    for i in range(n):
        ix = np.flatnonzero(mask[i] == 0)
        b, row = np.divmod(ix, L)
        E[i, b, :, np.arange(ix.size)] = U[i, row, :]
        miss_valid[i, : ix.size] = 1.0
    data = PackedData(
        *(jnp.asarray(a) for a in (times, K, x, mask, mask.sum(axis=1), U, lam, y, event, z, log_y, log_w, kq, centre)),
        jnp.asarray(E),
        jnp.asarray(miss_valid),
    )
    return data, fast


# ---------------------------------------------------------------- likelihood

def _scale_matrices(c, spec: ModelSpec):
    """Per-subject 2x2 between-biomarker scale ``A_i`` (n, 2, 2)."""
    tau2 = c["tau2"]
    if spec.mode == "multi":
        r = c["corr"]
        R = jnp.array([[1.0, r * tau2], [r * tau2, tau2**2]])
        return c["kappa2"][:, None, None] * R[None]
    k = c["kappa2"]
    zeros = jnp.zeros_like(k[:, 0])
    return jnp.stack(
        [jnp.stack([k[:, 0], zeros], -1), jnp.stack([zeros, k[:, 1] * tau2**2], -1)], -2
    )


def _resid(c, data: PackedData):
    L = data.times.shape[1]
    mu = jnp.concatenate(
        [jnp.repeat(c["beta1"][:, None], L, 1), jnp.repeat(c["beta2"][:, None], L, 1)], axis=1
    )
    return jnp.where(data.mask > 0, data.x - mu, 0.0)


def _block_inverse(A, lam, sigma2):
    """Entries of the per-eigenvalue 2x2 blocks of ``C^-1`` and ``log|C|``."""
    b00 = lam * A[0, 0] + sigma2[0]
    b11 = lam * A[1, 1] + sigma2[1]
    b01 = lam * A[0, 1]
    det = b00 * b11 - b01**2
    return (b11 / det, -b01 / det, b00 / det), jnp.sum(jnp.log(det))


def _fast_subject(A, U, lam, sigma2, r):
    """Fully observed subject: ``C = kron(A, K) + diag(sigma2)`` splits into
    2x2 blocks in the eigenbasis of ``K`` (exact for any noise)."""
    L = lam.shape[0]
    (i00, i01, i11), logdet = _block_inverse(A, lam, sigma2)
    rt = r.reshape(2, L) @ U
    alpha = jnp.concatenate([U @ (i00 * rt[0] + i01 * rt[1]), U @ (i01 * rt[0] + i11 * rt[1])])
    return logdet, alpha


@jax.custom_vjp
def _logdet_solve(S, b):
    """``(log|S|, S^-1 b)`` for SPD ``S`` with a closed-form reverse rule."""
    chol = jnp.linalg.cholesky(S)
    return 2.0 * jnp.sum(jnp.log(jnp.diag(chol))), cho_solve((chol, True), b)


def _logdet_solve_fwd(S, b):
    chol = jnp.linalg.cholesky(S)
    x = cho_solve((chol, True), b)
    return (2.0 * jnp.sum(jnp.log(jnp.diag(chol))), x), (chol, x)


def _logdet_solve_bwd(res, ct):
    # d log|S| = tr(S^-1 dS);  d(S^-1 b) = S^-1 db - S^-1 dS S^-1 b
    chol, x = res
    g_logdet, g_x = ct
    Sinv = cho_solve((chol, True), jnp.eye(chol.shape[0]))
    v = Sinv @ g_x
    return g_logdet * Sinv - jnp.outer(v, x), v


_logdet_solve.defvjp(_logdet_solve_fwd, _logdet_solve_bwd)


def _schur_subject(A, U, lam, sigma2, E, valid, r):
    """(logdet, alpha) of the observed sub-covariance, via the full precision.

    With ``P = C^-1`` and ``m`` the unobserved entries,
    ``log|C_oo| = log|C| + log|P_mm|`` and
    ``C_oo^-1 r_o = (P r - P_:m P_mm^-1 (P r)_m)_o``, which vanishes on ``m``.
    In the eigenbasis ``P`` is block diagonal, so with ``E`` the rotated unit
    vectors of the unobserved entries, ``P_mm = E^T B^-1 E``.  Padding
    columns of ``E`` are zero and act as identity rows.
    """
    (i00, i01, i11), logdet = _block_inverse(A, lam, sigma2)

    def binv(x):  # apply the 2x2 blocks to rotated (2, L, ...) arrays
        return jnp.stack([i00 * x[0] + i01 * x[1], i01 * x[0] + i11 * x[1]])

    z = binv(r.reshape(2, -1) @ U)  # rotated C^-1 r
    BE = binv(E.transpose(0, 2, 1)).transpose(0, 2, 1)  # (2, L, M)
    S = jnp.einsum("blm,blk->mk", E, BE) + jnp.diag(1.0 - valid)
    logdet_s, y = _logdet_solve(S, jnp.einsum("blm,bl->m", E, z))
    alpha = (z - BE @ y) @ U.T
    return logdet + logdet_s, alpha.reshape(-1)


def _long_terms(c, data: PackedData, spec: ModelSpec, fast: bool):
    A = _scale_matrices(c, spec)
    r = _resid(c, data)
    if fast:
        logdet, alpha = jax.vmap(_fast_subject, in_axes=(0, 0, 0, None, 0))(
            A, data.U, data.lam, c["sigma2"], r
        )
    else:
        logdet, alpha = jax.vmap(_schur_subject, in_axes=(0, 0, 0, None, 0, 0, 0))(
            A, data.U, data.lam, c["sigma2"], data.E, data.miss_valid, r
        )
    alpha = alpha * data.mask
    quad = jnp.sum(r * alpha, axis=1)
    ll = -0.5 * (quad + logdet + data.n_obs * LOG_2PI)
    return ll, A, alpha


def _latent_mean(c, A, alpha, kq):
    """Predicted latent biomarkers at query times, (n, Q, 2)."""
    n, _, L = kq.shape
    a = alpha.reshape(n, 2, L)
    s = jnp.einsum("nql,nbl->nqb", kq, a)
    mu = jnp.einsum("nab,nqb->nqa", A, s)
    beta = jnp.stack([c["beta1"], c["beta2"]], -1)
    return beta[:, None, :] + mu


def _surv_terms(c, A, alpha, data: PackedData, spec: ModelSpec):
    mu = _latent_mean(c, A, alpha, data.kq)  # (n, m + 1, 2)
    lin = c["beta_s0"] + data.z @ c["zeta_s"]
    lam = lin[:, None] + mu @ c["zeta_x"]  # (n, m + 1)
    nu = c["nu"]
    m = spec.n_grid
    log_h_mid = jnp.log(nu) + (nu - 1.0) * data.log_w + lam[:, :m]
    H = jnp.sum(jnp.exp(log_h_mid), axis=1) * data.y / m
    log_h_y = jnp.log(nu) + (nu - 1.0) * data.log_y + lam[:, m]
    return data.event * log_h_y - H


def _subject_loglik(theta, data: PackedData, layout: Layout, spec: ModelSpec, fast: bool):
    c, _ = _constrain_data(layout.split(theta), data)
    ll, A, alpha = _long_terms(c, data, spec, fast)
    if spec.survival:
        ll = ll + _surv_terms(c, A, alpha, data, spec)
    return ll


def _log_posterior_impl(theta, data: PackedData, layout: Layout, spec: ModelSpec, fast: bool):
    c, logjac = _constrain_data(layout.split(theta), data)
    ll, A, alpha = _long_terms(c, data, spec, fast)
    lp = jnp.sum(ll) + _log_prior_c(c, spec) + logjac
    if spec.survival:
        lp = lp + jnp.sum(_surv_terms(c, A, alpha, data, spec))
    return jnp.where(jnp.isfinite(lp), lp, -jnp.inf)


_STATIC = ("layout", "spec", "fast")
_logp_jit = jax.jit(_log_posterior_impl, static_argnames=_STATIC)
_vg_jit = jax.jit(jax.value_and_grad(_log_posterior_impl), static_argnames=_STATIC)
_subject_ll_jit = jax.jit(_subject_loglik, static_argnames=_STATIC)


@partial(jax.jit, static_argnames=_STATIC)
def _trajectory_impl(theta, p, grad, eps, n_steps, inv_mass, data, layout, spec, fast):
    vg = jax.value_and_grad(_log_posterior_impl)

    def body(i, carry):
        th, mom, _, g = carry
        mom = mom + 0.5 * eps * g
        th = th + eps * inv_mass * mom
        lp, g = vg(th, data, layout, spec, fast)
        mom = mom + 0.5 * eps * g
        return th, mom, lp, g

    init = (theta, p, jnp.asarray(0.0), grad)
    return jax.lax.fori_loop(0, n_steps, body, init)


def _predict_impl(theta, qk, data: PackedData, layout: Layout, spec: ModelSpec, fast: bool):
    """Latent predictive means and variances at query kernels ``qk`` (n, Q, L)."""
    c, _ = _constrain_data(layout.split(theta), data)
    _, A, alpha = _long_terms(c, data, spec, fast)
    mean = _latent_mean(c, A, alpha, qk)

    def subj_var(Ai, K, mask, q):
        L = K.shape[0]
        C = jnp.kron(Ai, K) + jnp.diag(jnp.repeat(c["sigma2"], L))
        C = C * (mask[:, None] * mask[None, :]) + jnp.diag(1.0 - mask)
        chol = jnp.linalg.cholesky(C)
        # rows of (A kron k(t*, t)) restricted to observed columns
        ks = jnp.einsum("ab,ql->qabl", Ai, q).reshape(q.shape[0], 2, 2 * L) * mask
        v = jax.vmap(lambda kk: cho_solve((chol, True), kk.T))(ks)  # (Q, 2L, 2)
        red = jnp.einsum("qak,qka->qa", ks, v)
        return jnp.diag(Ai)[None, :] - red

    var = jax.vmap(subj_var)(A, data.K, data.mask, qk)
    return mean, jnp.maximum(var, 0.0)


def _predict_mean_impl(theta, qk, data: PackedData, layout: Layout, spec: ModelSpec, fast: bool):
    c, _ = _constrain_data(layout.split(theta), data)
    _, A, alpha = _long_terms(c, data, spec, fast)
    return _latent_mean(c, A, alpha, qk)


@partial(jax.jit, static_argnames=_STATIC)
def _predict_jit(thetas, qk, data, layout, spec, fast):
    return jax.vmap(lambda th: _predict_impl(th, qk, data, layout, spec, fast))(thetas)


@partial(jax.jit, static_argnames=_STATIC)
def _predict_mean_jit(thetas, qk, data, layout, spec, fast):
    return jax.vmap(lambda th: _predict_mean_impl(th, qk, data, layout, spec, fast))(thetas)


# ---------------------------------------------------------------- public model

class JointModel:
    """Joint posterior for a dataset: subjects plus (optional) survival records.

    Records are matched to subjects by ``subject_id``.
    """

    def __init__(
        self,
        subjects: Sequence[SubjectLongitudinal],
        records: Optional[Sequence[SurvivalRecord]] = None,
        spec: Optional[ModelSpec] = None,
    ):
        if not subjects:
            raise ValueError("need at least one subject")
        spec = spec or ModelSpec(survival=records is not None)
        self.spec = spec
        self.subjects = list(subjects)
        ids = [s.subject_id for s in self.subjects]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate subject ids")
        if spec.survival:
            if records is None:
                raise ValueError("survival model requires survival records")
            by_id = {r.subject_id: r for r in records}
            missing = [i for i in ids if i not in by_id]
            if missing:
                raise ValueError(f"no survival record for subject {missing[0]}")
            self.records = [by_id[i] for i in ids]
            dims = {r.z_baseline.size for r in self.records}
            if len(dims) != 1:
                raise ValueError("all survival records need the same covariates")
            self.n_z = dims.pop()
        else:
            self.records = None
            self.n_z = 0
        self.data, self.fast = _pack_subjects(self.subjects, self.records, spec)
        self.layout = make_layout(spec, len(self.subjects), self.n_z)

    @property
    def subject_ids(self) -> List[str]:
        return [s.subject_id for s in self.subjects]

    @property
    def dim(self) -> int:
        return self.layout.size

    def _args(self):
        return dict(data=self.data, layout=self.layout, spec=self.spec, fast=self.fast)

    # -- transforms
    def unpack(self, theta) -> Tuple[JointParams, float]:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,):
            raise ValueError(f"theta must have length {self.dim}")
        if not np.all(np.isfinite(theta)):
            raise ValueError("theta must be finite")
        c, logjac = _constrain_data(self.layout.split(jnp.asarray(theta)), self.data)
        vals = {k: np.asarray(v) for k, v in c.items()}
        for k in ("tau2", "corr", "nu", "alpha"):
            if k in vals:
                vals[k] = float(vals[k])
        return JointParams(**vals), float(logjac)

    def pack(self, p: JointParams) -> UnconstrainedVector:
        d = p.as_dict()
        parts = []
        for name, shape in self.layout.blocks:
            target, kind = _TRANSFORMS[name]
            val = np.asarray(d[target], dtype=float)
            if val.shape != shape:
                raise ValueError(f"{target} has shape {val.shape}, expected {shape}")
            if not np.all(np.isfinite(val)):
                raise ValueError(f"{target} must be finite")
            parts.append(_unconstrain_value(kind, val).reshape(-1))
        theta = np.concatenate(parts) if parts else np.zeros(0)
        return UnconstrainedVector(self._shear(theta, +1.0), self.layout)

    def _shear(self, theta, sign: float) -> np.ndarray:
        """Add (``sign=+1``) or remove the survival centring on raw blocks."""
        if not self.spec.survival:
            return theta
        theta = np.array(theta, dtype=float)
        off = self.layout.offsets
        centre = np.asarray(self.data.centre)
        sh = (
            centre[0] * np.exp(theta[off["log_nu"]][0])
            + centre[1:3] @ theta[off["zeta_x"]]
            + centre[3:] @ theta[off["zeta_s"]]
        )
        theta[off["beta_s0"]] += sign * sh
        theta[off["locations"]] += sign * sh
        return theta

    # -- densities
    def log_prior(self, p: JointParams) -> float:
        c = {k: jnp.asarray(v) for k, v in p.as_dict().items()}
        return float(_log_prior_c(c, self.spec))

    def log_posterior(self, theta) -> float:
        return float(_logp_jit(jnp.asarray(theta, dtype=float), **self._args()))

    def grad_log_posterior(self, theta) -> np.ndarray:
        return self.logp_and_grad(theta)[1]

    def logp_and_grad(self, theta) -> Tuple[float, np.ndarray]:
        lp, g = _vg_jit(jnp.asarray(theta, dtype=float), **self._args())
        return float(lp), np.asarray(g)

    def subject_logliks(self, theta) -> np.ndarray:
        """Per-subject longitudinal (+ survival) log-likelihood terms."""
        return np.asarray(_subject_ll_jit(jnp.asarray(theta, dtype=float), **self._args()))

    def trajectory(self, theta, p, grad, eps, n_steps, inv_mass):
        """``n_steps`` leapfrog steps; returns ``(theta, p, logp, grad)``."""
        out = _trajectory_impl(
            jnp.asarray(theta), jnp.asarray(p), jnp.asarray(grad), float(eps), int(n_steps),
            jnp.asarray(inv_mass), **self._args(),
        )
        th, mom, lp, g = (np.asarray(a) for a in out)
        return th, mom, float(lp), g

    # -- prediction
    def _query_kernel(self, query_times):
        q = np.asarray(query_times, dtype=float)
        if q.ndim == 1:
            q = np.tile(q, (len(self.subjects), 1))
        return jnp.asarray(np.exp(-self.spec.rho2 * (q[:, :, None] - np.asarray(self.data.times)[:, None, :]) ** 2))

    def predict_latent(self, thetas, query_times) -> Tuple[np.ndarray, np.ndarray]:
        """Latent predictive mean/variance for each draw.

        ``query_times`` is ``(n, Q)``, one row of times per subject.  Returns
        arrays of shape ``(D, n, Q, 2)``.
        """
        thetas = jnp.atleast_2d(jnp.asarray(thetas, dtype=float))
        mean, var = _predict_jit(thetas, self._query_kernel(query_times), **self._args())
        return np.asarray(mean), np.asarray(var)

    def predict_latent_mean(self, thetas, query_times) -> np.ndarray:
        """Latent predictive means only, ``(D, n, Q, 2)``."""
        thetas = jnp.atleast_2d(jnp.asarray(thetas, dtype=float))
        return np.asarray(_predict_mean_jit(thetas, self._query_kernel(query_times), **self._args()))

    # -- initialization
    def initial_point(self, rng: Optional[np.random.Generator] = None, jitter: float = 0.25) -> np.ndarray:
        """Prior centres in unconstrained space, intercepts at subject means.

        With ``rng`` every coordinate is jittered by ``U(-jitter, jitter)``.
        """
        pr = self.spec.priors
        n = len(self.subjects)
        b = np.empty((2, n))
        for i, s in enumerate(self.subjects):
            for k, (vals, m) in enumerate(((s.values1, s.mask1), (s.values2, s.mask2))):
                b[k, i] = vals[m].mean() if m.any() else pr.beta_mean[k]
        kappa = np.full((n,) if self.spec.mode == "multi" else (n, 2), pr.kappa2_lognormal[0])
        blocks = {
            "beta1": b[0],
            "beta2": b[1],
            "log_kappa2": kappa,
            "log_sigma2": np.full(2, pr.sigma2_lognormal[0]),
            "log_tau2": np.array(0.0),
            "atanh_corr": np.array(0.0),
            "beta_s0": np.zeros(n),
            "log_nu": np.array(pr.nu_lognormal[0]),
            "zeta_s": np.zeros(self.n_z),
            "zeta_x": np.zeros(2),
            "logit_sticks": np.zeros(self.spec.n_components - 1),
            "locations": np.linspace(-1.0, 1.0, self.spec.n_components) if self.spec.n_components > 1 else np.zeros(1),
            "log_alpha": np.array(0.0),
        }
        theta = np.concatenate([np.asarray(blocks[name], float).reshape(-1) for name, _ in self.layout.blocks])
        if rng is not None:
            theta = theta + rng.uniform(-jitter, jitter, size=theta.shape)
        return theta

    def param_names(self) -> List[str]:
        """Constrained-view column names, one per scalar, in layout order."""
        ids = self.subject_ids
        names = []
        for name, shape in self.layout.blocks:
            target, _ = _TRANSFORMS[name]
            if target in ("beta1", "beta2", "beta_s0"):
                names += [f"{target}[{i}]" for i in ids]
            elif target == "kappa2" and len(shape) == 2:
                names += [f"kappa2_{k}[{i}]" for i in ids for k in (1, 2)]
            elif target == "kappa2":
                names += [f"kappa2[{i}]" for i in ids]
            elif target == "sigma2":
                names += ["sigma2_1", "sigma2_2"]
            elif target == "zeta_x":
                names += ["zeta_x1", "zeta_x2"]
            elif shape == ():
                names.append(target)
            else:
                names += [f"{target}[{k}]" for k in range(shape[0])]
        return names

    def constrained_row(self, theta) -> np.ndarray:
        c, _ = _constrain_data(self.layout.split(jnp.asarray(theta, dtype=float)), self.data)
        return np.concatenate(
            [np.asarray(c[_TRANSFORMS[name][0]]).reshape(-1) for name, _ in self.layout.blocks]
        )

    def theta_from_row(self, row) -> np.ndarray:
        """Inverse of :meth:`constrained_row`."""
        row = np.asarray(row, dtype=float)
        parts, start = [], 0
        for name, shape in self.layout.blocks:
            size = int(np.prod(shape)) if shape else 1
            parts.append(_unconstrain_value(_TRANSFORMS[name][1], row[start : start + size]))
            start += size
        return self._shear(np.concatenate(parts), +1.0)


# thin functional aliases

def pack(p: JointParams, model: JointModel) -> UnconstrainedVector:
    return model.pack(p)


def unpack(theta, model: JointModel) -> Tuple[JointParams, float]:
    return model.unpack(theta)


def log_prior(p: JointParams, model: JointModel) -> float:
    return model.log_prior(p)


def log_posterior(theta, model: JointModel) -> float:
    return model.log_posterior(theta)


def grad_log_posterior(theta, model: JointModel) -> np.ndarray:
    return model.grad_log_posterior(theta)


def with_spec(model: JointModel, **changes) -> JointModel:
    """Same data, modified :class:`ModelSpec`."""
    return JointModel(model.subjects, model.records, replace(model.spec, **changes))
