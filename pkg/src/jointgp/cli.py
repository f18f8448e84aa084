"""Command-line entry point.

::

    jointgp simulate   --config C --out DIR [--seed S]
    jointgp fit        DATA_DIR --mode multi|uni|cox --out DIR [--config C]
    jointgp predict    FIT_DIR --times 0,6,12 [--out DIR]
    jointgp experiment NAME --out DIR [--config C] [--paper-scale]
    jointgp summarize  DIR [DIR ...] --out DIR

Exit codes: 0 success, 2 invalid input or configuration, 3 runtime failure.
Every command writes ``manifest.json`` into its output directory, also when
it fails.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import traceback
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

__all__ = ["main", "RunManifest", "EXIT_OK", "EXIT_INVALID", "EXIT_RUNTIME"]

log = logging.getLogger("jointgp")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3
FITTER_LABELS = {"cox": "LOCF Cox", "uni": "Uni. Joint", "multi": "Multi. Joint"}


class _Invalid(ValueError):
    """Bad command-line input, reported with exit code 2."""


def _code_version() -> str:
    from importlib.metadata import PackageNotFoundError, version

    try:
        return version("artifact")
    except PackageNotFoundError:
        return "unknown"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    argv: List[str]
    config: Dict
    seed: Optional[int]
    code_version: str = field(default_factory=_code_version)
    started: str = field(default_factory=_now)
    finished: Optional[str] = None
    status: str = "running"
    outputs: List[str] = field(default_factory=list)
    error: Optional[Dict] = None
    flags: Dict = field(default_factory=dict)

    def add(self, *paths) -> None:
        for p in paths:
            self.outputs.append(str(Path(p)))

    def write(self, out: Path) -> Path:
        path = Path(out) / "manifest.json"
        self.finished = _now()
        rel = []
        for p in self.outputs:
            try:
                rel.append(str(Path(p).relative_to(out)))
            except ValueError:
                rel.append(p)
        doc = asdict(self)
        doc["outputs"] = sorted(set(rel)) + ["manifest.json"]
        path.write_text(json.dumps(doc, indent=2, default=str) + "\n", encoding="utf-8")
        return path


# ---------------------------------------------------------------- helpers

def _threads(arg: Optional[int]) -> int:
    if arg is not None:
        n = arg
    elif os.environ.get("JOINTGP_THREADS"):
        try:
            n = int(os.environ["JOINTGP_THREADS"])
        except ValueError:
            raise _Invalid("JOINTGP_THREADS must be an integer") from None
    else:
        n = os.cpu_count() or 1
    if n < 1:
        raise _Invalid("--threads must be at least 1")
    return n


def _with_seed(cfg, block: str, seed: Optional[int]):
    if seed is None:
        return cfg
    if seed < 0:
        raise _Invalid("--seed must be non-negative")
    sub = getattr(cfg, block).model_copy(update={"seed": int(seed)})
    return cfg.model_copy(update={block: sub})


def _write_csv(df: pd.DataFrame, path: Path, index: bool = False, exact: bool = False) -> Path:
    """Report tables use 10 significant digits; ``exact`` keeps round-trip floats."""
    df.to_csv(path, index=index, lineterminator="\n", float_format=None if exact else "%.10g")
    return path


def _flat_columns(table: pd.DataFrame) -> pd.DataFrame:
    out = table.copy()
    if isinstance(out.columns, pd.MultiIndex):
        out.columns = [" ".join(str(c) for c in col if str(c)) for col in out.columns]
    return out


def _parse_times(text: str) -> np.ndarray:
    try:
        vals = np.array([float(v) for v in text.replace(" ", "").split(",") if v != ""])
    except ValueError:
        raise _Invalid(f"--times: cannot parse {text!r}") from None
    if vals.size == 0:
        raise _Invalid("--times: no times given")
    if not np.all(np.isfinite(vals)):
        raise _Invalid("--times: times must be finite")
    if np.any(vals < 0):
        raise _Invalid("--times: times must be non-negative")
    return vals


# ---------------------------------------------------------------- simulate

def cmd_simulate(args, cfg, manifest: RunManifest, out: Path) -> int:
    from .io import write_dataset
    from .simgen import simulate_dataset

    cfg = _with_seed(cfg, "simulate", args.seed)
    manifest.config = cfg.model_dump(mode="json")
    manifest.seed = cfg.simulate.seed
    try:
        sim = cfg.sim_config()
    except (TypeError, ValueError) as exc:
        raise _Invalid(f"simulate: {exc}") from None
    ds = simulate_dataset(sim)
    manifest.add(*write_dataset(ds, out))
    if ds.records is not None:
        manifest.flags["censoring_rate"] = ds.censoring_rate
        manifest.flags["n_admin_censored"] = ds.n_admin_censored
    log.info("simulated %d subjects into %s", len(ds.subjects), out)
    return EXIT_OK


# ---------------------------------------------------------------- fit

def _case_counts(records, names):
    """Cases and deaths per covariate: the 1-level of 0/1 columns, else all."""
    z = np.array([r.z_baseline for r in records]).reshape(len(records), -1)
    ev = np.array([r.event for r in records], dtype=bool)
    out = {}
    for j, name in enumerate(names):
        col = z[:, j]
        sel = col == 1 if np.isin(col, (0.0, 1.0)).all() else np.ones(col.size, dtype=bool)
        out[name] = (int(sel.sum()), int((sel & ev).sum()))
    n, d = len(records), int(ev.sum())
    return out, (n, d)


def relative_risk_table(estimates: pd.DataFrame, fitter: str, records, z_names, cfg) -> pd.DataFrame:
    """Rows of the relative-risk layout for one fitter.

    ``estimates`` is indexed by covariate with columns ``coef``, ``lo``,
    ``hi`` (log scale) and optionally ``p_value``.  Biomarkers flagged in
    ``data.rr_decrement`` are reported per unit decrement.
    """
    counts, (n, d) = _case_counts(records, z_names)
    rows = []
    for name in estimates.index:
        e = estimates.loc[name]
        coef, lo, hi = float(e["coef"]), float(e["lo"]), float(e["hi"])
        label = name
        if name in ("x1", "x2"):
            k = int(name[-1]) - 1
            label = cfg.data.biomarker_names[k]
            if cfg.data.rr_decrement[k]:
                coef, lo, hi = -coef, -hi, -lo
                label += " (1-unit decrement)"
            cases, deaths = n, d
        else:
            cases, deaths = counts.get(name, (n, d))
        rows.append(
            {
                "covariate": label,
                "n_cases": cases,
                "n_deaths": deaths,
                "fitter": FITTER_LABELS[fitter],
                "rr": np.exp(coef),
                "rr_lower": np.exp(lo),
                "rr_upper": np.exp(hi),
                "p_value": float(e["p_value"]) if "p_value" in e and pd.notna(e["p_value"]) else np.nan,
            }
        )
    return pd.DataFrame(rows)


def _joint_estimates(summary: pd.DataFrame, z_names) -> pd.DataFrame:
    rows = {}
    for j, name in enumerate(z_names):
        rows[name] = summary.loc[f"zeta_s[{j}]"]
    for k in (1, 2):
        rows[f"x{k}"] = summary.loc[f"zeta_x{k}"]
    est = pd.DataFrame(rows).T
    return est.rename(columns={"mean": "coef", "q2.5": "lo", "q97.5": "hi"})[["coef", "lo", "hi"]]


def cmd_fit(args, cfg, manifest: RunManifest, out: Path) -> int:
    from .baselines import CoxSeparationError, fit_cox_locf, fit_joint
    from .io import read_dataset
    from .sampler import write_chain

    cfg = _with_seed(cfg, "hmc", args.seed)
    manifest.config = cfg.model_dump(mode="json")
    manifest.seed = cfg.hmc.seed
    manifest.flags["mode"] = args.mode
    data_dir = Path(args.data)
    if not data_dir.is_dir():
        raise _Invalid(f"{data_dir}: not a directory")
    subjects, records, z_names = read_dataset(data_dir, cfg.data.longitudinal, cfg.data.survival)
    if not any(r.event for r in records):
        raise _Invalid("survival data contain no events")
    # keep the inputs next to the results so that predict can rebuild the model
    (out / "data").mkdir(exist_ok=True)
    for name in (cfg.data.longitudinal, cfg.data.survival):
        manifest.add(shutil.copyfile(data_dir / name, out / "data" / name))

    if args.mode == "cox":
        try:
            cox = fit_cox_locf(records, subjects, z_names + ["x1", "x2"])
        except CoxSeparationError as exc:
            raise RuntimeError(str(exc)) from None
        tab = cox.table()
        manifest.add(_write_csv(tab.reset_index(), out / "coefficients.csv"))
        ci = pd.DataFrame(
            {
                "coef": tab["coef"],
                "lo": tab["coef"] - 1.959963984540054 * tab["se"],
                "hi": tab["coef"] + 1.959963984540054 * tab["se"],
                "p_value": tab["p_value"],
            }
        )
    else:
        spec = cfg.model_spec(args.mode, survival=True)
        fit = fit_joint(subjects, records, mode=args.mode, spec=spec, hmc=cfg.hmc_config(),
                        n_chains=cfg.hmc.n_chains, threads=_threads(args.threads))
        names = fit.model.param_names()
        for ch in fit.chains:
            manifest.add(*write_chain(ch, names, out / f"chain_{ch.chain_index}.csv", cfg.hmc_config()))
        summary = fit.summary()
        manifest.add(_write_csv(summary.reset_index(), out / "summary.csv"))
        zeta = summary[summary.index.str.startswith("zeta")]
        bad = zeta[~(zeta["rhat"] <= 1.1)]
        manifest.flags["n_divergent"] = int(sum(c.n_divergent for c in fit.chains))
        manifest.flags["rhat_warning"] = bool(len(bad))
        if len(bad):
            manifest.flags["rhat_warning_parameters"] = {k: float(v) for k, v in bad["rhat"].items()}
            print(
                "WARN: R-hat above 1.1 for " + ", ".join(f"{k} ({v:.3f})" for k, v in bad["rhat"].items()),
                file=sys.stderr,
            )
        ci = _joint_estimates(summary, z_names)
    rr = relative_risk_table(ci, args.mode, records, z_names, cfg)
    manifest.add(_write_csv(rr, out / "relative_risk.csv"))
    return EXIT_OK


# ---------------------------------------------------------------- predict

def _load_fit(fit_dir: Path):
    from .config import parse_config
    from .io import read_dataset
    from .model import JointModel

    try:
        man = json.loads((fit_dir / "manifest.json").read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise _Invalid(f"{fit_dir}: no readable fit manifest ({exc})") from None
    if man.get("command") != "fit" or man.get("status") != "ok":
        raise _Invalid(f"{fit_dir}: not a successful fit directory")
    mode = man["flags"]["mode"]
    if mode == "cox":
        raise _Invalid(f"{fit_dir}: cox fits have no latent trajectories to predict")
    cfg = parse_config(man["config"])
    subjects, records, _ = read_dataset(fit_dir / "data", cfg.data.longitudinal, cfg.data.survival)
    model = JointModel(subjects, records, cfg.model_spec(mode, survival=True))
    chain_files = sorted(fit_dir.glob("chain_*.csv"))
    if not chain_files:
        raise _Invalid(f"{fit_dir}: no chain files")
    names = model.param_names()
    thetas = []
    for f in chain_files:
        df = pd.read_csv(f, float_precision="round_trip")
        if list(df.columns) != names:
            raise _Invalid(f"{f}: columns do not match the model parameters")
        thetas.append(np.array([model.theta_from_row(r) for r in df.to_numpy()]))
    return model, np.concatenate(thetas), man


def cmd_predict(args, cfg, manifest: RunManifest, out: Path) -> int:
    from .baselines import posterior_predict

    times = _parse_times(args.times)
    model, thetas, fit_man = _load_fit(Path(args.fit))
    manifest.config = fit_man["config"]
    manifest.seed = fit_man.get("seed")
    mean, lo, hi = posterior_predict(model, thetas, times, level=args.level)
    rows = []
    for i, sid in enumerate(model.subject_ids):
        for j, t in enumerate(times):
            for b in range(2):
                rows.append((sid, float(t), b + 1, mean[i, j, b], lo[i, j, b], hi[i, j, b]))
    df = pd.DataFrame(rows, columns=["subject_id", "time", "biomarker", "mean", "lower", "upper"])
    manifest.add(_write_csv(df, out / "predictions.csv"))
    return EXIT_OK


# ---------------------------------------------------------------- experiment

def cmd_experiment(args, cfg, manifest: RunManifest, out: Path) -> int:
    from .experiments import ExperimentError, run_experiment

    cfg = _with_seed(cfg, "experiment", args.seed)
    manifest.config = cfg.model_dump(mode="json")
    manifest.seed = cfg.experiment.seed
    manifest.flags["paper_scale"] = bool(args.paper_scale)
    try:
        ecfg = cfg.experiment_config(args.name, paper_scale=args.paper_scale)
    except ValueError as exc:
        raise _Invalid(str(exc)) from None
    code = EXIT_OK
    try:
        df = run_experiment(ecfg, threads=_threads(args.threads))
    except ExperimentError as exc:
        msg, df = exc.args
        manifest.error = {"type": "ExperimentError", "message": msg}
        print(f"error: {msg}", file=sys.stderr)
        code = EXIT_RUNTIME
    manifest.flags["failure_rate"] = float((df["status"] != "ok").mean())
    manifest.add(_write_csv(df.drop(columns=["seconds"]), out / "replicates.csv", exact=True))
    manifest.add(_write_csv(df[["experiment", "corr", "setting", "replicate", "seconds"]], out / "timings.csv"))
    if (df["status"] == "ok").any():
        manifest.add(_write_table(df, out))
    return code


def _write_table(df: pd.DataFrame, out: Path) -> Path:
    from .experiments import scenario_table, type2_table

    if df["experiment"].iloc[0] == "type2":
        table = type2_table(df)
    else:
        table = scenario_table(df)
    return _write_csv(_flat_columns(table).reset_index(), out / "table.csv")


# ---------------------------------------------------------------- summarize

def _wide_rr(rr: pd.DataFrame) -> pd.DataFrame:
    """Relative-risk rows of several fitters side by side."""
    rr = rr.copy()
    rr["cell"] = [
        f"{a:.2f} ({b:.2f},{c:.2f})" for a, b, c in zip(rr["rr"], rr["rr_lower"], rr["rr_upper"])
    ]
    order = [FITTER_LABELS[k] for k in ("cox", "uni", "multi")]
    fitters = [f for f in order if f in set(rr["fitter"])]
    covs = list(dict.fromkeys(rr["covariate"]))
    base = rr.drop_duplicates("covariate").set_index("covariate")[["n_cases", "n_deaths"]]
    wide = base.loc[covs].copy()
    for f in fitters:
        g = rr[rr["fitter"] == f].set_index("covariate")
        wide[f] = g["cell"].reindex(covs)
        if f == FITTER_LABELS["cox"]:
            wide["LOCF Cox p"] = g["p_value"].reindex(covs).map(lambda p: f"{p:.3g}")
    return wide.reset_index()


def cmd_summarize(args, cfg, manifest: RunManifest, out: Path) -> int:
    dirs = [Path(d) for d in args.dirs]
    kinds = {}
    for d in dirs:
        try:
            man = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise _Invalid(f"{d}: no readable manifest ({exc})") from None
        kinds.setdefault(man.get("command"), []).append(d)
    unknown = set(kinds) - {"fit", "experiment"}
    if unknown:
        raise _Invalid(f"cannot summarize outputs of {sorted(map(str, unknown))}")
    if "fit" in kinds:
        parts = []
        for d in kinds["fit"]:
            f = d / "relative_risk.csv"
            if not f.exists():
                raise _Invalid(f"{d}: no relative_risk.csv (did the fit succeed?)")
            parts.append(pd.read_csv(f, float_precision="round_trip"))
        manifest.add(_write_csv(_wide_rr(pd.concat(parts, ignore_index=True)), out / "relative_risk_table.csv"))
    for k, d in enumerate(kinds.get("experiment", [])):
        df = pd.read_csv(d / "replicates.csv", float_precision="round_trip")
        df["error"] = df["error"].fillna("")
        sub = out if len(kinds["experiment"]) == 1 else out / d.name
        sub.mkdir(parents=True, exist_ok=True)
        manifest.add(_write_table(df, sub))
    return EXIT_OK


# ---------------------------------------------------------------- entry

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int, help="override the seed of the relevant config block")
    common.add_argument("--threads", type=int, help="worker threads (default: $JOINTGP_THREADS or all cores)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="jointgp", description="Multivariate GP joint longitudinal-survival models.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="generate a synthetic dataset")
    f = sub.add_parser("fit", parents=[common], help="fit a model to a dataset directory")
    f.add_argument("data", help="directory with longitudinal.csv and survival.csv")
    f.add_argument("--mode", choices=("multi", "uni", "cox"), default="multi")
    pr = sub.add_parser("predict", parents=[common], help="latent biomarker predictions from a fit")
    pr.add_argument("fit", help="output directory of a joint fit")
    pr.add_argument("--times", required=True, help="comma-separated prediction times")
    pr.add_argument("--level", type=float, default=0.95, help="interval probability")
    e = sub.add_parser("experiment", parents=[common], help="replicated simulation study")
    e.add_argument("name", choices=("scenario1", "scenario2", "scenario3", "type2"))
    e.add_argument("--paper-scale", action="store_true", help="use the published sample sizes")
    s = sub.add_parser("summarize", parents=[common], help="combine fit or experiment outputs into tables")
    s.add_argument("dirs", nargs="+", help="fit or experiment output directories")
    return p


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "experiment": cmd_experiment,
    "summarize": cmd_summarize,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    from .config import ConfigError, load_config
    from .io import DataError

    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(command=args.command, argv=argv, config={}, seed=args.seed)
    code = EXIT_OK
    try:
        cfg = load_config(args.config)
        manifest.config = cfg.model_dump(mode="json")
        if args.command == "predict" and not 0 < args.level < 1:
            raise _Invalid("--level must lie in (0, 1)")
        code = COMMANDS[args.command](args, cfg, manifest, out)
    except (ConfigError, DataError, _Invalid) as exc:
        code = EXIT_INVALID
        manifest.error = {"type": type(exc).__name__, "message": str(exc)}
        print(f"error: {exc}", file=sys.stderr)
    except Exception as exc:  # reported in the manifest, never swallowed silently
        code = EXIT_RUNTIME
        manifest.error = {"type": type(exc).__name__, "message": str(exc), "traceback": traceback.format_exc()}
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
    manifest.status = "ok" if code == EXIT_OK else "failed"
    manifest.write(out)
    return code


if __name__ == "__main__":
    sys.exit(main())
