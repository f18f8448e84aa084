"""JSON run configuration.

One document with the blocks ``data``, ``priors``, ``kernel``, ``dp``,
``hmc``, ``simulate`` and ``experiment``; every block is optional and every
key has a default.  Unknown keys are rejected so that typos surface as
errors carrying the offending field path.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .experiments import ExperimentConfig
from .model import ModelSpec, Priors
from .sampler import HmcConfig
from .simgen import (
    Covariate,
    Missingness,
    SimConfig,
    scenario_config,
    table5_config,
    type2_config,
)

__all__ = ["ConfigError", "RunConfig", "load_config", "parse_config"]

Pair = Tuple[float, float]


class ConfigError(ValueError):
    """Invalid configuration; the message names the field path."""


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DataBlock(_Block):
    longitudinal: str = "longitudinal.csv"
    survival: str = "survival.csv"
    hazard_grid: int = Field(25, ge=1)
    biomarker_names: Tuple[str, str] = ("x1", "x2")
    rr_decrement: Tuple[bool, bool] = (False, False)


class PriorsBlock(_Block):
    beta_mean: Pair = (5.0, 20.0)
    beta_var: Pair = (4.0, 25.0)
    sigma2_lognormal: Pair = (-1.0, 1.0)
    kappa2_lognormal: Pair = (-1.0, 2.0)
    tau2_cauchy_scale: float = Field(2.5, gt=0)
    lkj_eta: float = Field(1.0, gt=0)
    nu_lognormal: Pair = (0.0, 1.0)
    zeta_var: float = Field(25.0, gt=0)

    @model_validator(mode="after")
    def _positive_scales(self):
        if min(self.beta_var) <= 0:
            raise ValueError("beta_var entries must be positive")
        for name in ("sigma2_lognormal", "kappa2_lognormal", "nu_lognormal"):
            if getattr(self, name)[1] <= 0:
                raise ValueError(f"{name} sdlog must be positive")
        return self


class KernelBlock(_Block):
    rho2: float = Field(0.1, gt=0)


class DPBlock(_Block):
    n_components: int = Field(20, ge=1)
    alpha_gamma: Pair = (3.0, 3.0)
    base_mean: float = 0.0
    base_var: float = Field(1.0, gt=0)
    sigma2_b0: float = Field(1.0, gt=0)

    @model_validator(mode="after")
    def _gamma(self):
        if min(self.alpha_gamma) <= 0:
            raise ValueError("alpha_gamma shape and rate must be positive")
        return self


class HmcBlock(_Block):
    n_warmup: int = Field(1000, ge=0)
    n_draws: int = Field(1000, ge=1)
    n_chains: int = Field(4, ge=1)
    leapfrog_steps: int = Field(20, ge=1)
    target_accept: float = Field(0.8, gt=0, lt=1)
    seed: int = Field(0, ge=0, lt=2**64)
    adapt_mass: bool = True
    mass: Optional[List[float]] = None
    divergence_threshold: float = Field(1000.0, gt=0)
    max_warmup_divergent: float = Field(0.5, ge=0, le=1)
    init_jitter: float = Field(0.25, ge=0)
    step_jitter: float = Field(0.2, ge=0, lt=1)

    @model_validator(mode="after")
    def _mass(self):
        if self.mass is not None and min(self.mass, default=1.0) <= 0:
            raise ValueError("mass entries must be positive")
        return self


class MissingnessBlock(_Block):
    kind: Literal["overlap", "frequency"]
    fraction: float = Field(ge=0, le=1)
    share: float = Field(1.0 / 3.0, ge=0, le=1)


class CovariateBlock(_Block):
    name: str
    kind: Literal["normal", "bernoulli", "categorical"] = "normal"
    mean: float = 0.0
    sd: float = Field(1.0, ge=0)
    p: float = Field(0.5, ge=0, le=1)
    levels: Tuple[str, ...] = ()
    probs: Tuple[float, ...] = ()
    coef: Tuple[float, ...] = (0.0,)


class SimulateBlock(_Block):
    """Generator settings.  ``preset`` picks the base configuration; any
    field given here overrides it."""

    preset: Literal["type2", "scenario1", "scenario2", "scenario3", "table5"] = "type2"
    setting: Optional[float] = Field(None, ge=0, le=1)
    seed: int = Field(0, ge=0)
    replicate_index: int = Field(0, ge=0)
    n_subjects: Optional[int] = Field(None, ge=1)
    n_visits: Optional[int] = Field(None, ge=1)
    n_times: Optional[Tuple[int, int]] = None
    followup_max: Optional[float] = Field(None, gt=0)
    rho2: Optional[float] = Field(None, gt=0)
    corr: Optional[float] = Field(None, gt=-1, lt=1)
    tau2: Optional[float] = Field(None, gt=0)
    kappa2_bounds: Optional[Pair] = None
    kappa2_per_biomarker: Optional[bool] = None
    intercept_mean: Optional[Pair] = None
    intercept_var: Optional[Pair] = None
    noise: Optional[Pair] = None
    survival: Optional[bool] = None
    nu: Optional[float] = Field(None, gt=0)
    zeta_x: Optional[Pair] = None
    covariates: Optional[List[CovariateBlock]] = None
    mixture_means: Optional[List[float]] = None
    mixture_var: Optional[float] = Field(None, gt=0)
    mixture_weights: Optional[List[float]] = None
    censoring_target: Optional[float] = Field(None, ge=0, lt=1)
    missingness: Optional[MissingnessBlock] = None
    grid_step: Optional[float] = Field(None, gt=0)
    horizon_factor: Optional[float] = Field(None, gt=1)

    @model_validator(mode="after")
    def _counts(self):
        if self.n_times is not None and min(self.n_times) < 1:
            raise ValueError("n_times entries must be positive")
        return self


class ExperimentBlock(_Block):
    replicates: int = Field(20, ge=1)
    n_subjects: Optional[int] = Field(None, ge=1)
    n_times: Optional[int] = Field(None, ge=1)
    corr_levels: List[float] = [0.1, 0.3, 0.5, 0.7, 0.9]
    settings: Optional[List[float]] = None
    seed: int = Field(0, ge=0)
    n_chains: int = Field(2, ge=1)
    n_warmup: int = Field(500, ge=0)
    n_draws: int = Field(500, ge=1)
    max_failure_rate: float = Field(0.2, ge=0, le=1)

    @model_validator(mode="after")
    def _ranges(self):
        if any(not -1 < c < 1 for c in self.corr_levels):
            raise ValueError("corr_levels must lie in (-1, 1)")
        if self.settings is not None and any(not 0 <= s <= 1 for s in self.settings):
            raise ValueError("settings must lie in [0, 1]")
        return self


class RunConfig(_Block):
    data: DataBlock = DataBlock()
    priors: PriorsBlock = PriorsBlock()
    kernel: KernelBlock = KernelBlock()
    dp: DPBlock = DPBlock()
    hmc: HmcBlock = HmcBlock()
    simulate: SimulateBlock = SimulateBlock()
    experiment: ExperimentBlock = ExperimentBlock()

    # -- conversions to library objects
    def model_spec(self, mode: str = "multi", survival: bool = True) -> ModelSpec:
        pr = Priors(
            **self.priors.model_dump(),
            alpha_gamma=self.dp.alpha_gamma,
            base_mean=self.dp.base_mean,
            base_var=self.dp.base_var,
            sigma2_b0=self.dp.sigma2_b0,
        )
        return ModelSpec(
            mode=mode,
            survival=survival,
            n_components=self.dp.n_components,
            n_grid=self.data.hazard_grid,
            rho2=self.kernel.rho2,
            priors=pr,
        )

    def hmc_config(self) -> HmcConfig:
        d = self.hmc.model_dump()
        d.pop("n_chains")
        return HmcConfig(**d)

    def sim_config(self) -> SimConfig:
        """Generator configuration; presets use the full published designs."""
        s = self.simulate
        over = s.model_dump(exclude={"preset", "setting", "covariates", "missingness"}, exclude_none=True)
        for k in ("mixture_means", "mixture_weights"):
            if k in over:
                over[k] = tuple(over[k])
        if s.covariates is not None:
            over["covariates"] = tuple(Covariate(**c.model_dump()) for c in s.covariates)
        if s.missingness is not None:
            over["missingness"] = Missingness(**s.missingness.model_dump())
        if s.preset == "type2":
            return type2_config(True, **over)
        if s.preset == "table5":
            return table5_config(**over)
        scenario = int(s.preset[-1])
        default_setting = 0.2 if scenario == 2 else 0.0
        setting = default_setting if s.setting is None else s.setting
        n = over.pop("n_subjects", 100)
        l = over.pop("n_visits", 60)
        corr = over.pop("corr", 0.9)
        return scenario_config(scenario, corr, setting, n_subjects=n, n_times=l, **over)

    def experiment_config(self, name: str, paper_scale: bool = False) -> ExperimentConfig:
        e = self.experiment
        hmc = self.hmc_config()
        hmc.n_warmup, hmc.n_draws = e.n_warmup, e.n_draws
        return ExperimentConfig(
            name=name,
            replicates=e.replicates,
            n_subjects=e.n_subjects,
            n_times=e.n_times,
            corr_levels=tuple(e.corr_levels),
            settings=None if e.settings is None else tuple(e.settings),
            paper_scale=paper_scale,
            seed=e.seed,
            n_chains=e.n_chains,
            hmc=hmc,
            spec=self.model_spec(),
            max_failure_rate=e.max_failure_rate,
        )


def _format(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        path = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{path}: {e['msg']}")
    return "; ".join(lines)


def parse_config(doc: Union[dict, None]) -> RunConfig:
    try:
        return RunConfig.model_validate(doc or {})
    except ValidationError as exc:
        raise ConfigError(_format(exc)) from None


def load_config(path: Optional[Union[str, Path]]) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("<root>: config must be a JSON object")
    return parse_config(doc)
