"""CSV dataset formats.

``longitudinal.csv``
    ``subject_id, biomarker (1|2), time, value`` - observed values only.
``survival.csv``
    ``subject_id, time, event (0|1)`` followed by zero or more ``z_*``
    baseline covariate columns.
``truth.csv``
    ``subject_id, quantity, biomarker, time, value, masked`` - generating
    values for simulated data (latent trajectories, masked measurements,
    subject parameters and global constants).

Floats are written with Python's shortest round-trip representation, so
identical inputs give byte-identical files.
"""
from __future__ import annotations

from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .longitudinal import SubjectLongitudinal
from .simgen import SimulatedDataset
from .survival import SurvivalRecord

__all__ = [
    "DataError",
    "write_longitudinal",
    "read_longitudinal",
    "write_survival",
    "read_survival",
    "write_truth",
    "read_dataset",
    "write_dataset",
]

PathLike = Union[str, Path]
LONG_COLUMNS = ["subject_id", "biomarker", "time", "value"]
SURV_COLUMNS = ["subject_id", "time", "event"]


class DataError(ValueError):
    """Malformed input data."""


def _to_csv(df: pd.DataFrame, path: PathLike) -> Path:
    path = Path(path)
    df.to_csv(path, index=False, lineterminator="\n", encoding="utf-8")
    return path


def _read_csv(path: PathLike, required: Sequence[str]) -> pd.DataFrame:
    path = Path(path)
    try:
        df = pd.read_csv(path, dtype={"subject_id": str}, encoding="utf-8", float_precision="round_trip")
    except FileNotFoundError:
        raise DataError(f"{path}: file not found") from None
    except (pd.errors.EmptyDataError, pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise DataError(f"{path}: cannot parse ({exc})") from None
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")
    if df.empty:
        raise DataError(f"{path}: no data rows")
    if df["subject_id"].isna().any():
        raise DataError(f"{path}: empty subject_id")
    return df


def write_longitudinal(subjects: Sequence[SubjectLongitudinal], path: PathLike) -> Path:
    rows = []
    for s in subjects:
        for b, (vals, m) in enumerate(((s.values1, s.mask1), (s.values2, s.mask2)), start=1):
            for t, v in zip(s.times[m], vals[m]):
                rows.append((s.subject_id, b, float(t), float(v)))
    return _to_csv(pd.DataFrame(rows, columns=LONG_COLUMNS), path)


def read_longitudinal(path: PathLike) -> List[SubjectLongitudinal]:
    """Subjects in order of first appearance, on their pooled time grid."""
    df = _read_csv(path, LONG_COLUMNS)
    if not df["biomarker"].isin([1, 2]).all():
        raise DataError(f"{path}: biomarker must be 1 or 2")
    for col in ("time", "value"):
        vals = pd.to_numeric(df[col], errors="coerce")
        if not np.isfinite(vals).all():
            raise DataError(f"{path}: column {col!r} must be finite numbers")
        df[col] = vals.astype(float)
    if (df["time"] < 0).any():
        raise DataError(f"{path}: negative measurement time")
    dup = df.duplicated(["subject_id", "biomarker", "time"])
    if dup.any():
        r = df[dup].iloc[0]
        raise DataError(f"{path}: duplicate measurement for subject {r.subject_id}, biomarker {r.biomarker}, time {r.time}")
    out = []
    for sid, g in df.groupby("subject_id", sort=False):
        times = np.unique(g["time"].to_numpy())
        vals = np.full((2, times.size), np.nan)
        mask = np.zeros((2, times.size), dtype=bool)
        idx = np.searchsorted(times, g["time"].to_numpy())
        b = g["biomarker"].to_numpy() - 1
        vals[b, idx] = g["value"].to_numpy()
        mask[b, idx] = True
        out.append(SubjectLongitudinal(sid, times, vals[0], vals[1], mask[0], mask[1]))
    return out


def write_survival(records: Sequence[SurvivalRecord], path: PathLike, covariate_names=None) -> Path:
    p = records[0].z_baseline.size if records else 0
    names = list(covariate_names) if covariate_names is not None else [f"z_{j}" for j in range(p)]
    df = pd.DataFrame(
        {
            "subject_id": [r.subject_id for r in records],
            "time": [r.time for r in records],
            "event": [int(r.event) for r in records],
        }
    )
    for j, name in enumerate(names):
        df[name] = [float(r.z_baseline[j]) for r in records]
    return _to_csv(df, path)


def read_survival(path: PathLike) -> Tuple[List[SurvivalRecord], List[str]]:
    df = _read_csv(path, SURV_COLUMNS)
    extra = [c for c in df.columns if c not in SURV_COLUMNS]
    bad = [c for c in extra if not c.startswith("z_")]
    if bad:
        raise DataError(f"{path}: unexpected columns {bad} (covariates must start with 'z_')")
    if df["subject_id"].duplicated().any():
        raise DataError(f"{path}: duplicate subject_id {df.loc[df['subject_id'].duplicated(), 'subject_id'].iloc[0]}")
    if not df["event"].isin([0, 1]).all():
        raise DataError(f"{path}: event must be 0 or 1")
    try:
        recs = [
            SurvivalRecord(
                str(r["subject_id"]), float(r["time"]), int(r["event"]),
                np.array([float(r[c]) for c in extra]),
            )
            for _, r in df.iterrows()
        ]
    except (ValueError, TypeError) as exc:
        raise DataError(f"{path}: {exc}") from None
    return recs, extra


def write_truth(ds: SimulatedDataset, path: PathLike) -> Path:
    rows = []
    for s in ds.subjects:
        for b, (lat, vals, m) in enumerate(
            ((s.latent1, s.values1, s.mask1), (s.latent2, s.values2, s.mask2)), start=1
        ):
            for t, x, v, obs in zip(s.times, lat, vals, m):
                rows.append((s.subject_id, "latent", b, float(t), float(x), int(not obs)))
                if not obs:
                    rows.append((s.subject_id, "value", b, float(t), float(v), 1))
            rows.append((s.subject_id, "beta", b, np.nan, float(s.beta[b - 1]), 0))
            rows.append((s.subject_id, "kappa2", b, np.nan, float(s.kappa2[b - 1]), 0))
    if ds.records is not None:
        for r in ds.records:
            rows.append((r.subject_id, "beta_s0", np.nan, np.nan, float(r.beta_s0), 0))
            rows.append((r.subject_id, "event_time", np.nan, np.nan, float(r.event_time), 0))
            rows.append((r.subject_id, "censor_time", np.nan, np.nan, float(r.censor_time), 0))
    cfg = ds.config
    glob = {
        "corr": cfg.corr,
        "tau2": cfg.tau2,
        "rho2": cfg.rho2,
        "sigma2_1": cfg.noise[0],
        "sigma2_2": cfg.noise[1],
    }
    if ds.records is not None:
        glob.update(nu=cfg.nu, zeta_x1=cfg.zeta_x[0], zeta_x2=cfg.zeta_x[1], c_max=ds.c_max,
                    n_admin_censored=ds.n_admin_censored)
        for name, b in zip(cfg.covariate_columns, cfg.zeta_s):
            glob[f"zeta_{name}"] = b
    for k, v in glob.items():
        rows.append(("", k, np.nan, np.nan, float(v), 0))
    df = pd.DataFrame(rows, columns=["subject_id", "quantity", "biomarker", "time", "value", "masked"])
    df["biomarker"] = df["biomarker"].astype("Int64")
    return _to_csv(df, path)


def write_dataset(ds: SimulatedDataset, out: PathLike) -> List[Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    files = [write_longitudinal(ds.subjects, out / "longitudinal.csv")]
    if ds.records is not None:
        names = ds.config.covariate_columns
        files.append(write_survival(ds.records, out / "survival.csv", names))
    files.append(write_truth(ds, out / "truth.csv"))
    return files


def read_dataset(directory: PathLike, longitudinal="longitudinal.csv", survival="survival.csv", need_survival=True):
    """Subjects and (optionally) survival records restricted to subjects
    present in both files.  Returns ``(subjects, records, covariate_names)``."""
    d = Path(directory)
    subjects = read_longitudinal(d / longitudinal)
    if not need_survival:
        return subjects, None, []
    records, names = read_survival(d / survival)
    ids = {r.subject_id for r in records}
    subjects = [s for s in subjects if s.subject_id in ids]
    if not subjects:
        raise DataError("no subject has both longitudinal and survival rows")
    keep = {s.subject_id for s in subjects}
    records = [r for r in records if r.subject_id in keep]
    return subjects, records, names
