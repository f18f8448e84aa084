"""Comparator fitters and the prediction scores used to compare them.

* ``fit_multi`` / ``fit_uni`` run the joint model with correlated or
  independent biomarker processes through the same HMC machinery.
* ``fit_cox_locf`` is a Cox proportional-hazards fit in which each biomarker
  enters as a last-observation-carried-forward step function.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import norm

from .longitudinal import SubjectLongitudinal
from .model import JointModel, ModelSpec
from .sampler import Chain, HmcConfig, diagnostics, run_chains
from .survival import SurvivalRecord

__all__ = [
    "FitResult",
    "fit_joint",
    "posterior_predict",
    "fit_multi",
    "fit_uni",
    "CoxFit",
    "CoxSeparationError",
    "fit_cox_locf",
    "locf_values",
    "MseReport",
    "prediction_mse",
    "percent_decrease",
    "mse_report",
    "mixture_quantiles",
]


# ---------------------------------------------------------------- joint fits

@dataclass
class FitResult:
    model: JointModel
    chains: List[Chain]

    @property
    def mode(self) -> str:
        return self.model.spec.mode

    @property
    def draws(self) -> np.ndarray:
        """Unconstrained draws of all chains stacked, ``(D, dim)``."""
        return np.concatenate([c.draws for c in self.chains], axis=0)

    def constrained_draws(self) -> pd.DataFrame:
        rows = np.concatenate([c.constrained for c in self.chains], axis=0)
        return pd.DataFrame(rows, columns=self.model.param_names())

    def summary(self) -> pd.DataFrame:
        return diagnostics(self.chains, names=self.model.param_names())

    def posterior_mean(self, name: str) -> float:
        return float(self.constrained_draws()[name].mean())

    def predict_mean(self, query_times, batch: int = 250) -> np.ndarray:
        """Posterior mean of the latent biomarkers, ``(n, Q, 2)``."""
        thetas = self.draws
        total = 0.0
        for a in range(0, thetas.shape[0], batch):
            total = total + self.model.predict_latent_mean(thetas[a : a + batch], query_times).sum(axis=0)
        return total / thetas.shape[0]

    def predict(self, query_times, level: float = 0.95, batch: int = 250):
        """Posterior mean and equal-tailed interval; see :func:`posterior_predict`."""
        return posterior_predict(self.model, self.draws, query_times, level, batch)


def posterior_predict(model: JointModel, thetas, query_times, level: float = 0.95, batch: int = 250):
    """Posterior mean and equal-tailed interval of the latent biomarkers.

    ``thetas`` are unconstrained draws ``(D, dim)``; ``query_times`` is
    ``(n, Q)`` (or ``(Q,)`` shared by all subjects).  Each draw contributes a
    Gaussian and the interval is taken from their equal-weight mixture.
    Returns ``mean, lower, upper`` of shape ``(n, Q, 2)``.
    """
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    means, variances = [], []
    for a in range(0, thetas.shape[0], batch):
        m, v = model.predict_latent(thetas[a : a + batch], query_times)
        means.append(m)
        variances.append(v)
    m = np.concatenate(means)
    v = np.concatenate(variances)
    tail = 0.5 * (1.0 - level)
    lo, hi = mixture_quantiles(m, np.sqrt(v), (tail, 1.0 - tail))
    return m.mean(axis=0), lo, hi


def mixture_quantiles(means, sds, probs: Sequence[float], iters: int = 60):
    """Quantiles of equal-weight normal mixtures along axis 0, by bisection."""
    means = np.asarray(means, dtype=float)
    sds = np.maximum(np.asarray(sds, dtype=float), 1e-300)
    out = []
    for p in probs:
        lo = np.min(means - 10.0 * sds, axis=0)
        hi = np.max(means + 10.0 * sds, axis=0)
        for _ in range(iters):
            mid = 0.5 * (lo + hi)
            cdf = norm.cdf((mid[None] - means) / sds).mean(axis=0)
            below = cdf < p
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        out.append(0.5 * (lo + hi))
    return tuple(out)


def fit_joint(
    subjects: Sequence[SubjectLongitudinal],
    records: Optional[Sequence[SurvivalRecord]] = None,
    mode: str = "multi",
    spec: Optional[ModelSpec] = None,
    hmc: Optional[HmcConfig] = None,
    n_chains: int = 4,
    threads: int = 1,
) -> FitResult:
    spec = spec or ModelSpec()
    spec = replace(spec, mode=mode, survival=records is not None)
    model = JointModel(subjects, records, spec)
    chains = run_chains(hmc or HmcConfig(), model, n_chains=n_chains, threads=threads)
    return FitResult(model, chains)


def fit_multi(subjects, records=None, **kw) -> FitResult:
    return fit_joint(subjects, records, mode="multi", **kw)


def fit_uni(subjects, records=None, **kw) -> FitResult:
    """Independent biomarker processes: correlation pinned at 0 and a
    separate ``kappa2`` per biomarker; survival part unchanged."""
    return fit_joint(subjects, records, mode="uni", **kw)


# ---------------------------------------------------------------- Cox LOCF

class CoxSeparationError(RuntimeError):
    """The partial likelihood has no finite maximizer."""


@dataclass
class CoxFit:
    names: List[str]
    coefficients: np.ndarray
    standard_errors: np.ndarray
    iterations: int
    grad_norm: float
    loglik: float
    information: np.ndarray = field(repr=False, default=None)

    def table(self) -> pd.DataFrame:
        z = self.coefficients / self.standard_errors
        return pd.DataFrame(
            {
                "coef": self.coefficients,
                "se": self.standard_errors,
                "hazard_ratio": np.exp(self.coefficients),
                "p_value": 2.0 * norm.sf(np.abs(z)),
            },
            index=pd.Index(self.names, name="covariate"),
        )


def locf_values(times: np.ndarray, values: np.ndarray, at: np.ndarray) -> np.ndarray:
    """Last value observed at or before each ``at``; the first value is
    carried back before the first measurement."""
    times = np.asarray(times, dtype=float)
    if times.size == 0:
        raise ValueError("LOCF needs at least one observation")
    idx = np.searchsorted(times, np.asarray(at, dtype=float), side="right") - 1
    return np.asarray(values, dtype=float)[np.clip(idx, 0, None)]


def _cox_design(records, subjects, covariate_names):
    """Covariate tensor at every distinct event time.

    Returns ``X`` (E, n, p), risk indicator (E, n), event indicator (E, n).
    """
    n = len(records)
    y = np.array([r.time for r in records])
    ev = np.array([r.event for r in records], dtype=bool)
    t_ev = np.unique(y[ev])
    Z = np.array([r.z_baseline for r in records]).reshape(n, -1)
    cols = [np.broadcast_to(Z[None, :, j], (t_ev.size, n)) for j in range(Z.shape[1])]
    if subjects is not None:
        by_id = {s.subject_id: s for s in subjects}
        missing = [r.subject_id for r in records if r.subject_id not in by_id]
        if missing:
            raise ValueError(f"no longitudinal data for subjects {missing[:5]}")
        for k in range(2):
            col = np.empty((t_ev.size, n))
            for i, r in enumerate(records):
                s = by_id[r.subject_id]
                m = s.mask1 if k == 0 else s.mask2
                if not m.any():
                    raise ValueError(f"subject {r.subject_id}: biomarker {k + 1} never observed")
                v = s.values1 if k == 0 else s.values2
                col[:, i] = locf_values(s.times[m], v[m], t_ev)
            cols.append(col)
    X = np.stack(cols, axis=-1) if cols else np.zeros((t_ev.size, n, 0))
    if X.shape[-1] != len(covariate_names):
        raise ValueError(f"expected {X.shape[-1]} covariate names, got {len(covariate_names)}")
    risk = y[None, :] >= t_ev[:, None]
    died = ev[None, :] & (y[None, :] == t_ev[:, None])
    return X, risk, died


def _cox_terms(beta, X, risk, died):
    """Breslow log partial likelihood, score and observed information."""
    eta = X @ beta  # (E, n)
    eta = np.where(risk, eta, -np.inf)
    shift = np.max(eta, axis=1, keepdims=True)
    w = np.exp(eta - shift)
    S0 = w.sum(axis=1)
    xbar = np.einsum("en,enp->ep", w, X) / S0[:, None]
    d = died.sum(axis=1)
    ll = float(np.sum(np.where(died, X @ beta, 0.0)) - np.sum(d * (np.log(S0) + shift[:, 0])))
    score = np.einsum("en,enp->p", died.astype(float), X) - (d[:, None] * xbar).sum(axis=0)
    xc = X - xbar[:, None, :]
    info = np.einsum("e,en,enp,enq->pq", d / S0, w, xc, xc)
    return ll, score, info


def fit_cox_locf(
    records: Sequence[SurvivalRecord],
    subjects: Optional[Sequence[SubjectLongitudinal]] = None,
    covariate_names: Optional[Sequence[str]] = None,
    max_iter: int = 100,
    tol: float = 1e-8,
) -> CoxFit:
    """Cox PH by Newton-Raphson with step-halving, Breslow ties.

    Baseline covariates come from ``records[i].z_baseline``; when
    ``subjects`` is given both biomarkers are appended as LOCF step
    functions of the raw observations.
    """
    records = list(records)
    if not any(r.event for r in records):
        raise ValueError("Cox fit needs at least one event")
    n_z = records[0].z_baseline.size
    if covariate_names is None:
        covariate_names = [f"z{j}" for j in range(n_z)] + (["x1", "x2"] if subjects is not None else [])
    names = list(covariate_names)
    X, risk, died = _cox_design(records, subjects, names)
    # centring leaves the partial likelihood unchanged and tames exp()
    X = X - X[risk].mean(axis=0)
    sd_all = X[risk].std(axis=0)
    # constant covariates have a zero score everywhere: coefficient 0, no information
    active = sd_all > 0
    X = X[..., active]
    p = X.shape[-1]
    beta = np.zeros(p)
    ll, g, info = _cox_terms(beta, X, risk, died)
    it = 0
    while np.max(np.abs(g), initial=0.0) >= tol and it < max_iter:
        it += 1
        try:
            step = np.linalg.solve(info, g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(info, g, rcond=None)[0]
        for _ in range(60):
            new = beta + step
            ll_new, g_new, info_new = _cox_terms(new, X, risk, died)
            if np.isfinite(ll_new) and ll_new >= ll - 1e-12 * abs(ll):
                break
            step = 0.5 * step
        beta, ll, g, info = new, ll_new, g_new, info_new
    gnorm = float(np.max(np.abs(g), initial=0.0))
    sd = sd_all[active]
    act_names = [n for n, a in zip(names, active) if a]
    evals = np.linalg.eigvalsh(info) if p else np.ones(1)
    # a flat direction shows as a huge standardized standard error even when
    # Newton's gradient has already underflowed below tol
    z_se = np.sqrt(np.abs(np.diag(np.linalg.pinv(info)))) * sd if p else np.zeros(0)
    if (gnorm >= tol or np.any(np.abs(beta) * sd > 15.0) or np.any(z_se > 100.0)
            or evals.min() <= 1e-10 * max(evals.max(), 1.0)):
        j = int(np.argmax(np.abs(beta) * sd + z_se)) if p else 0
        raise CoxSeparationError(
            f"partial likelihood is monotone in covariate {act_names[j]!r} "
            f"(coef {beta[j]:.3g} after {it} iterations)"
        )
    coef = np.zeros(active.size)
    se = np.full(active.size, np.nan)
    coef[active] = beta
    se[active] = np.sqrt(np.diag(np.linalg.inv(info))) if p else np.zeros(0)
    full_info = np.zeros((active.size, active.size))
    full_info[np.ix_(active, active)] = info
    info = full_info
    beta = coef
    return CoxFit(names, beta, se, it, gnorm, ll, info)


# ---------------------------------------------------------------- scores

@dataclass(frozen=True)
class MseReport:
    multi: float
    uni: float

    @property
    def percent_decrease(self) -> float:
        return percent_decrease(self.uni, self.multi)


def prediction_mse(truth, pred) -> float:
    truth = np.asarray(truth, dtype=float).reshape(-1)
    pred = np.asarray(pred, dtype=float).reshape(-1)
    if truth.size == 0:
        raise ValueError("no masked entries to score")
    if truth.shape != pred.shape:
        raise ValueError("truth and predictions differ in shape")
    return float(np.mean((truth - pred) ** 2))


def percent_decrease(uni: float, multi: float) -> float:
    return 100.0 * (uni - multi) / uni


def mse_report(truth, multi_pred, uni_pred) -> MseReport:
    return MseReport(prediction_mse(truth, multi_pred), prediction_mse(truth, uni_pred))
