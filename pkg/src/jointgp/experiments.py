"""Replicated simulation studies comparing the multi, uni and Cox fitters.

``run_experiment`` loops replicates over a grid of settings and returns one
row per replicate; ``scenario_table`` and ``type2_table`` aggregate them into
the comparison layouts (MSE and %Dec per setting, or coefficient mean, SD and
MSE per fitter).
"""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .baselines import (
    CoxSeparationError,
    fit_cox_locf,
    fit_joint,
    percent_decrease,
    prediction_mse,
)
from .model import ModelSpec
from .sampler import HmcConfig
from .simgen import SimConfig, scenario_config, simulate_dataset, type2_config

__all__ = [
    "ExperimentConfig",
    "ExperimentError",
    "EXPERIMENTS",
    "masked_targets",
    "scenario_replicate",
    "type2_replicate",
    "run_experiment",
    "scenario_table",
    "type2_table",
]

log = logging.getLogger(__name__)

EXPERIMENTS = ("scenario1", "scenario2", "scenario3", "type2")
DEFAULT_SETTINGS = {
    "scenario1": (1.0, 0.5, 0.0),
    "scenario2": (0.2, 0.5, 0.8),
    "scenario3": (1.0, 0.5, 0.0),
    "type2": (None,),
}
PAPER_CORRS = (0.1, 0.3, 0.5, 0.7, 0.9)


class ExperimentError(RuntimeError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    replicates: int = 20
    n_subjects: Optional[int] = None
    n_times: Optional[int] = None
    corr_levels: Tuple[float, ...] = PAPER_CORRS
    settings: Optional[Tuple[float, ...]] = None
    paper_scale: bool = False
    seed: int = 0
    n_chains: int = 2
    hmc: HmcConfig = field(default_factory=lambda: HmcConfig(n_warmup=500, n_draws=500))
    spec: ModelSpec = field(default_factory=ModelSpec)
    sim_overrides: Tuple[Tuple[str, object], ...] = ()
    max_failure_rate: float = 0.2

    def __post_init__(self):
        if self.name not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.name!r}; choose from {EXPERIMENTS}")
        if self.replicates < 1 or self.n_chains < 1:
            raise ValueError("replicates and n_chains must be positive")

    @property
    def scenario(self) -> Optional[int]:
        return None if self.name == "type2" else int(self.name[-1])

    @property
    def cell_settings(self) -> Tuple:
        return self.settings if self.settings is not None else DEFAULT_SETTINGS[self.name]

    def sim_config(self, corr: float, setting, replicate: int) -> SimConfig:
        extra = dict(self.sim_overrides)
        if self.name == "type2":
            kw = dict(seed=self.seed, replicate_index=replicate)
            if self.n_subjects:
                kw["n_subjects"] = self.n_subjects
            kw.update(extra)
            return type2_config(self.paper_scale, **kw)
        n = self.n_subjects or (100 if self.paper_scale else 50)
        l = self.n_times or (60 if self.paper_scale else 30)
        return scenario_config(
            self.scenario, corr, setting, n_subjects=n, n_times=l,
            seed=self.seed, replicate_index=replicate, **extra,
        )

    def cells(self) -> List[Tuple[float, object]]:
        corrs = (0.9,) if self.name == "type2" else self.corr_levels
        return [(c, s) for c in corrs for s in self.cell_settings]


def _hmc_seed(cfg: ExperimentConfig, replicate: int, cell: int) -> int:
    seq = np.random.SeedSequence([int(cfg.seed), int(replicate), int(cell)])
    return int(seq.generate_state(1, dtype=np.uint32)[0])


def masked_targets(subjects):
    """Query times (n, L), latent truth (n, L, 2) and the masked selector.

    Rows are padded to the longest subject; padding is never selected.
    """
    L = max(s.n_times for s in subjects)
    n = len(subjects)
    q = np.zeros((n, L))
    truth = np.zeros((n, L, 2))
    sel = np.zeros((n, L, 2), dtype=bool)
    for i, s in enumerate(subjects):
        l = s.n_times
        q[i, :l] = s.times
        q[i, l:] = s.times[-1]
        truth[i, :l, 0] = s.latent1
        truth[i, :l, 1] = s.latent2
        sel[i, :l, 0] = ~s.mask1
        sel[i, :l, 1] = ~s.mask2
    return q, truth, sel


def _max_rhat(fit, prefix=None) -> float:
    s = fit.summary()
    if prefix is not None:
        s = s[s.index.str.startswith(prefix)]
    return float(s["rhat"].max())


def scenario_replicate(cfg: ExperimentConfig, corr: float, setting: float, replicate: int, cell: int) -> Dict:
    data = simulate_dataset(cfg.sim_config(corr, setting, replicate))
    q, truth, sel = masked_targets(data.subjects)
    hmc = replace(cfg.hmc, seed=_hmc_seed(cfg, replicate, cell))
    row = {}
    for mode in ("multi", "uni"):
        fit = fit_joint(data.subjects, None, mode=mode, spec=cfg.spec, hmc=hmc, n_chains=cfg.n_chains)
        mean = fit.predict_mean(q)
        row[f"mse_{mode}"] = prediction_mse(truth[sel], mean[sel])
        row[f"rhat_{mode}"] = _max_rhat(fit)
    row["pct_dec"] = percent_decrease(row["mse_uni"], row["mse_multi"])
    row["n_masked"] = int(sel.sum())
    return row


def type2_replicate(cfg: ExperimentConfig, corr: float, setting, replicate: int, cell: int) -> Dict:
    data = simulate_dataset(cfg.sim_config(corr, setting, replicate))
    hmc = replace(cfg.hmc, seed=_hmc_seed(cfg, replicate, cell))
    row = {"censoring": data.censoring_rate, "n_admin_censored": data.n_admin_censored}
    for mode in ("multi", "uni"):
        fit = fit_joint(data.subjects, data.records, mode=mode, spec=cfg.spec, hmc=hmc, n_chains=cfg.n_chains)
        draws = fit.constrained_draws()
        for k in (1, 2):
            row[f"{mode}_zeta_x{k}"] = float(draws[f"zeta_x{k}"].mean())
            row[f"{mode}_zeta_x{k}_sd"] = float(draws[f"zeta_x{k}"].std(ddof=1))
        row[f"rhat_{mode}"] = _max_rhat(fit, "zeta")
    try:
        cox = fit_cox_locf(data.records, data.subjects)
        row["cox_zeta_x1"], row["cox_zeta_x2"] = (float(b) for b in cox.coefficients[-2:])
    except CoxSeparationError as exc:
        log.warning("replicate %d: %s", replicate, exc)
        row["cox_zeta_x1"] = row["cox_zeta_x2"] = np.nan
    return row


def _one(cfg: ExperimentConfig, job) -> Dict:
    cell, corr, setting, rep = job
    base = {"experiment": cfg.name, "corr": corr, "setting": setting, "replicate": rep}
    fn = type2_replicate if cfg.name == "type2" else scenario_replicate
    t0 = time.perf_counter()
    try:
        row = fn(cfg, corr, setting, rep, cell)
        status, err = "ok", ""
    except Exception as exc:  # recorded and skipped
        log.warning("%s replicate %d (corr=%s, setting=%s) failed: %s", cfg.name, rep, corr, setting, exc)
        row, status, err = {}, "failed", f"{type(exc).__name__}: {exc}"
    return {**base, **row, "status": status, "error": err, "seconds": time.perf_counter() - t0}


def run_experiment(cfg: ExperimentConfig, threads: int = 1) -> pd.DataFrame:
    """One row per (cell, replicate).  Rows are ordered independently of
    ``threads``; every replicate owns its RNG streams."""
    jobs = [
        (ci, corr, setting, r)
        for ci, (corr, setting) in enumerate(cfg.cells())
        for r in range(cfg.replicates)
    ]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            rows = list(ex.map(lambda j: _one(cfg, j), jobs))
    else:
        rows = [_one(cfg, j) for j in jobs]
    df = pd.DataFrame(rows)
    failed = float((df["status"] != "ok").mean())
    df.attrs["failure_rate"] = failed
    if failed > cfg.max_failure_rate:
        raise ExperimentError(
            f"{failed:.0%} of replicates failed (limit {cfg.max_failure_rate:.0%})", df
        )
    return df


def _setting_label(name: str, setting) -> str:
    if name == "scenario2":
        return f"{setting:.0%} Freq."
    return f"{setting:.0%} Overlap"


def scenario_table(df: pd.DataFrame) -> pd.DataFrame:
    """Rows: correlation.  Columns: (setting, Multi/Uni/%Dec).

    Multi and Uni are average MSEs over successful replicates; %Dec is
    computed from those averages.
    """
    ok = df[df["status"] == "ok"]
    name = df["experiment"].iloc[0]
    out = {}
    for setting, g in ok.groupby("setting", sort=False):
        m = g.groupby("corr")[["mse_multi", "mse_uni"]].mean()
        label = _setting_label(name, setting)
        out[(label, "Multi")] = m["mse_multi"]
        out[(label, "Uni")] = m["mse_uni"]
        out[(label, "%Dec")] = percent_decrease(m["mse_uni"], m["mse_multi"])
    table = pd.DataFrame(out)
    table.columns = pd.MultiIndex.from_tuples(table.columns)
    table.index.name = "corr"
    return table


def type2_table(df: pd.DataFrame, truth=(0.5, -0.3)) -> pd.DataFrame:
    """Rows: biomarker coefficient.  Columns: (fitter, Mean/SD/MSE) of the
    point estimates across replicates."""
    ok = df[df["status"] == "ok"]
    rows = {}
    for k, (label, true) in enumerate(zip(("Albumin(t)", "BMI(t)"), truth), start=1):
        r = {("True", ""): true}
        for fitter, col in (("LOCF Cox", "cox"), ("Uni Joint", "uni"), ("Multi Joint", "multi")):
            est = ok[f"{col}_zeta_x{k}"].dropna().to_numpy()
            r[(fitter, "Mean")] = est.mean() if est.size else np.nan
            r[(fitter, "SD")] = est.std(ddof=1) if est.size > 1 else np.nan
            r[(fitter, "MSE")] = np.mean((est - true) ** 2) if est.size else np.nan
        rows[label] = r
    table = pd.DataFrame(rows).T
    table.columns = pd.MultiIndex.from_tuples(table.columns)
    table.index.name = "covariate"
    return table
