"""Cell-month panel: ingestion, imputation, covariate transforms, lagging, splits.

Months are integer indices counted from January of the epoch year (January
1990 is month 0), so the calendar month is ``month % 12``.
"""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Iterator, NamedTuple

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

__all__ = [
    "PanelObservation",
    "CountryMonth",
    "Periodisation",
    "Panel",
    "Split",
    "PanelError",
    "REQUIRED_COLUMNS",
    "FATALITY_COLUMNS",
    "DERIVED_FEATURES",
    "load_panel",
    "write_panel",
    "impute_missing",
    "transform_covariate",
    "arms_import_sums",
    "aggregate_arms_imports",
    "lag_covariates",
    "split_periodisation",
    "country_months",
]

REQUIRED_COLUMNS = ("cell_id", "country_id", "month", "sb_fatalities", "lon", "lat")
FATALITY_COLUMNS = ("sb_fatalities", "os_fatalities", "ns_fatalities")
_KINDS = ("sb", "os", "ns")

# features built by lag_covariates rather than read from the input file
DERIVED_FEATURES = (
    tuple(f"{k}_any" for k in _KINDS)
    + tuple(f"{k}_count" for k in _KINDS)
    + tuple(f"{k}_since" for k in _KINDS)
    + tuple(f"c_{k}_any" for k in _KINDS)
    + tuple(f"c_{k}_count" for k in _KINDS)
    + tuple(f"c_{k}_since" for k in _KINDS)
    + ("c_lon", "c_lat")
)
# names a covariate spec may use without a matching input column
BUILTIN_NAMES = frozenset(DERIVED_FEATURES) | {"month", "trend", "spatial", "country_id", "lon", "lat"}


class PanelError(ValueError):
    """Structural or parse problem in panel data."""


@dataclass(frozen=True)
class PanelObservation:
    cell_id: int
    country_id: int
    month: int
    sb_fatalities: int
    os_fatalities: int
    ns_fatalities: int
    lon: float
    lat: float
    covariates: dict = field(default_factory=dict)


@dataclass(frozen=True)
class CountryMonth:
    country_id: int
    month: int
    total_fatalities: int
    any_fatality: bool


@dataclass(frozen=True)
class Periodisation:
    """Month ranges (inclusive) of one expanding-window step."""

    pre_train: tuple
    calibration: int
    train: tuple
    test: int


@dataclass(frozen=True)
class Panel:
    """Immutable wrapper around a sorted cell-month frame.

    ``covariates`` lists the covariate columns; ``lag`` is set once
    :func:`lag_covariates` has moved covariates to their source months.
    """

    frame: pd.DataFrame
    covariates: tuple = ()
    lag: int | None = None

    def __len__(self):
        return len(self.frame)

    @property
    def months(self):
        m = self.frame["month"]
        return (int(m.min()), int(m.max())) if len(m) else (None, None)

    def missing_mask(self):
        return self.frame[list(self.covariates)].isna()

    @property
    def needs_imputation(self):
        return bool(self.missing_mask().to_numpy().any()) if self.covariates else False

    def with_frame(self, frame):
        return replace(self, frame=frame)

    def select_months(self, lo=None, hi=None):
        m = self.frame["month"]
        keep = np.ones(len(m), dtype=bool)
        if lo is not None:
            keep &= (m >= lo).to_numpy()
        if hi is not None:
            keep &= (m <= hi).to_numpy()
        return self.with_frame(self.frame.loc[keep].reset_index(drop=True))

    def observations(self) -> Iterator[PanelObservation]:
        f = self.frame
        cov = list(self.covariates)
        for row in f.itertuples(index=False):
            d = row._asdict()
            yield PanelObservation(
                cell_id=int(d["cell_id"]),
                country_id=int(d["country_id"]),
                month=int(d["month"]),
                sb_fatalities=int(d["sb_fatalities"]),
                os_fatalities=int(d.get("os_fatalities", 0)),
                ns_fatalities=int(d.get("ns_fatalities", 0)),
                lon=float(d["lon"]),
                lat=float(d["lat"]),
                covariates={c: float(d[c]) for c in cov},
            )


def _sorted(frame):
    return frame.sort_values(["country_id", "cell_id", "month"], kind="mergesort").reset_index(
        drop=True
    )


def _check_cell_country(frame):
    per_cell = frame.groupby("cell_id")["country_id"].nunique()
    bad = per_cell[per_cell > 1]
    if len(bad):
        cell = int(bad.index[0])
        countries = sorted(frame.loc[frame["cell_id"] == cell, "country_id"].unique().tolist())
        raise PanelError(f"cell {cell} is mapped to several countries {countries}")


def _check_unique_rows(frame):
    dup = frame.duplicated(["cell_id", "month"])
    if dup.any():
        r = frame.loc[dup].iloc[0]
        raise PanelError(f"duplicate record for cell {int(r.cell_id)} in month {int(r.month)}")


def load_panel(path, schema=None):
    """Read a panel CSV.

    Parameters
    ----------
    path : str or path-like
        UTF-8, comma separated, header row; ``NA`` (or an empty field) marks
        a missing covariate.
    schema : list of CovariateSpec, optional
        When given, every raw covariate the spec refers to must be a column.

    Returns
    -------
    Panel
        Rows sorted by (country_id, cell_id, month); missing covariates are
        kept as NaN and reported by :attr:`Panel.needs_imputation`.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise PanelError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not v.strip() for v in rec):
                continue
            if len(rec) != len(header):
                raise PanelError(
                    f"{path}, line {lineno}: expected {len(header)} fields, found {len(rec)}"
                )
            rows.append((lineno, rec))

    missing_cols = [c for c in REQUIRED_COLUMNS if c not in header]
    if missing_cols:
        raise PanelError(f"{path}: missing required columns {missing_cols}")
    if len(set(header)) != len(header):
        raise PanelError(f"{path}: duplicate column names in header")

    int_cols = {"cell_id", "country_id", "month"} | {c for c in FATALITY_COLUMNS if c in header}
    data = {h: [] for h in header}
    for lineno, rec in rows:
        for h, raw in zip(header, rec):
            val = raw.strip()
            if h in int_cols:
                try:
                    num = int(val)
                except ValueError:
                    raise PanelError(
                        f"{path}, line {lineno}: column {h!r} needs an integer, got {raw!r}"
                    ) from None
                if h in FATALITY_COLUMNS and num < 0:
                    raise PanelError(f"{path}, line {lineno}: negative fatality count in {h!r}")
                data[h].append(num)
            else:
                if val in ("", "NA", "NaN", "nan"):
                    if h in ("lon", "lat"):
                        raise PanelError(f"{path}, line {lineno}: coordinates may not be missing")
                    data[h].append(np.nan)
                    continue
                try:
                    data[h].append(float(val))
                except ValueError:
                    raise PanelError(
                        f"{path}, line {lineno}: column {h!r} needs a number, got {raw!r}"
                    ) from None

    frame = pd.DataFrame(data)
    for c in int_cols:
        frame[c] = frame[c].astype(np.int64)
    for c in FATALITY_COLUMNS:
        if c not in frame:
            frame[c] = np.zeros(len(frame), dtype=np.int64)
    _check_cell_country(frame)
    _check_unique_rows(frame)

    covariates = tuple(
        h for h in header if h not in REQUIRED_COLUMNS and h not in FATALITY_COLUMNS
    )
    if schema is not None:
        needed = set()
        for entry in schema:
            names = [entry.name] + ([entry.other] if entry.other else []) + list(entry.coords or ())
            needed.update(n for n in names if n not in BUILTIN_NAMES)
        absent = sorted(needed - set(covariates))
        if absent:
            raise PanelError(f"{path}: covariate columns {absent} required by the spec are absent")
    frame = frame[list(REQUIRED_COLUMNS[:4]) + ["os_fatalities", "ns_fatalities", "lon", "lat"] + list(covariates)]
    return Panel(_sorted(frame), covariates)


def write_panel(panel, path):
    """Write the canonical CSV form (sorted rows, ``NA`` for missing, repr floats)."""
    f = panel.frame
    cols = ["cell_id", "country_id", "month", "sb_fatalities", "os_fatalities", "ns_fatalities",
            "lon", "lat"] + list(panel.covariates)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        arrays = [f[c].to_numpy() for c in cols]
        for i in range(len(f)):
            out = []
            for c, arr in zip(cols, arrays):
                v = arr[i]
                if c in ("cell_id", "country_id", "month") or c in FATALITY_COLUMNS:
                    out.append(str(int(v)))
                elif pd.isna(v):
                    out.append("NA")
                else:
                    out.append(repr(float(v)))
            w.writerow(out)


def impute_missing(panel):
    """Deterministic single imputation of missing covariates.

    Per cell and covariate the last observation is carried forward; values
    still missing take the country mean of that covariate, then the global
    mean. A covariate with no observed value at all is an error.
    """
    if not panel.needs_imputation:
        return panel
    f = panel.frame.copy()
    for c in panel.covariates:
        col = f[c]
        if not col.isna().any():
            continue
        if col.isna().all():
            raise PanelError(f"covariate {c!r} is missing everywhere; cannot impute")
        filled = col.groupby(f["cell_id"], sort=False).ffill()
        country_mean = col.groupby(f["country_id"]).transform("mean")
        filled = filled.fillna(country_mean).fillna(col.mean())
        f[c] = filled
    return panel.with_frame(f)


def transform_covariate(x, transform, name="covariate"):
    """Apply ``identity``, ``log`` or ``log1p`` with domain checks."""
    arr = np.asarray(x, dtype=float)
    if transform == "identity":
        out = arr
    elif transform == "log":
        bad = ~(arr > 0)
        if np.any(bad):
            v = arr[bad].flat[0] if arr.ndim else float(arr)
            raise ValueError(f"log transform of {name!r} needs positive values, got {v!r}")
        out = np.log(arr)
    elif transform == "log1p":
        bad = ~(arr >= 0)
        if np.any(bad):
            v = arr[bad].flat[0] if arr.ndim else float(arr)
            raise ValueError(f"log(x+1) transform of {name!r} needs values >= 0, got {v!r}")
        out = np.log1p(arr)
    else:
        raise ValueError(f"unsupported transform {transform!r} for {name!r}")
    return float(out) if out.ndim == 0 else out


def arms_import_sums(yearly_tiv, year):
    """Raw short-term (years y-1..y) and long-term (y-10..y-2) import totals.

    A component whose window has a missing year is returned as NaN, flagging
    it for imputation.
    """
    def window(years):
        vals = [yearly_tiv.get(y) for y in years]
        if any(v is None or (isinstance(v, float) and np.isnan(v)) for v in vals):
            return np.nan
        if any(v < 0 for v in vals):
            raise ValueError(f"negative TIV in years {list(years)}")
        return float(sum(vals))

    return window(range(year - 1, year + 1)), window(range(year - 10, year - 1))


def aggregate_arms_imports(yearly_tiv, year):
    """``(log(1 + ST), log(1 + LT))`` for ``year``; constant across its 12 months."""
    st, lt = arms_import_sums(yearly_tiv, year)
    return float(np.log1p(st)), float(np.log1p(lt))


def _months_since(frame, group, event, month):
    """log(1 + months since the last event at or before each row, within ``group``)."""
    last = frame[month].where(frame[event] > 0)
    last = last.groupby(frame[group], sort=False).ffill()
    first = frame.groupby(group, sort=False)[month].transform("min")
    # no event yet: count from just before the first observed month
    last = last.fillna(first - 1)
    return np.log1p((frame[month] - last).to_numpy(dtype=float))


def _history_features(frame):
    """Per (cell, month) fatality features and per (country, month) aggregates."""
    f = frame[["cell_id", "country_id", "month", "lon", "lat", *FATALITY_COLUMNS]].copy()
    f = f.sort_values(["cell_id", "month"], kind="mergesort").reset_index(drop=True)
    for k in _KINDS:
        col = f"{k}_fatalities"
        f[f"{k}_any"] = (f[col] > 0).astype(float)
        f[f"{k}_count"] = f[col].astype(float)
        f[f"{k}_since"] = _months_since(f, "cell_id", col, "month")

    cm = f.groupby(["country_id", "month"], sort=True)[list(FATALITY_COLUMNS)].sum().reset_index()
    for k in _KINDS:
        col = f"{k}_fatalities"
        cm[f"c_{k}_any"] = (cm[col] > 0).astype(float)
        cm[f"c_{k}_count"] = cm[col].astype(float)
        cm[f"c_{k}_since"] = _months_since(cm, "country_id", col, "month")
    cm = cm.drop(columns=list(FATALITY_COLUMNS))

    cells = f.drop_duplicates("cell_id")[["cell_id", "country_id", "lon", "lat"]]
    centroid = cells.groupby("country_id")[["lon", "lat"]].mean()
    centroid.columns = ["c_lon", "c_lat"]

    f = f.drop(columns=list(FATALITY_COLUMNS) + ["lon", "lat", "country_id"])
    return f, cm, centroid


def lag_covariates(panel, s, spec=None, horizon=False):
    """Pair each target month ``t`` with covariates observed in ``t - s``.

    Raw covariates and the derived fatality features (indicators, counts and
    log(1 + months since the last fatality), per cell and per country) are
    taken from the cell's record at ``t - s``; targets stay at ``t``. Rows
    without a ``t - s`` record are dropped. A ``source_month`` column records
    ``t - s``.

    Parameters
    ----------
    panel : Panel
    s : int
        Lag in months, >= 1.
    spec : list of CovariateSpec, optional
        Entries with ``lag_months`` take that covariate from ``t - lag``
        instead (``lag`` must be >= ``s``).
    horizon : bool
        Also emit rows for the ``s`` months after the last observed month,
        with unknown (NaN) targets, for true forecasting.
    """
    if s < 1:
        raise ValueError("lag must be at least one month")
    if panel.lag is not None:
        raise PanelError("panel is already lagged")
    f = panel.frame
    lo, hi = panel.months
    if lo is None or s > hi - lo:
        if not horizon or lo is None:
            warnings.warn(f"lag {s} exceeds the panel span; result is empty", stacklevel=2)
            empty = f.iloc[0:0].copy()
            empty["source_month"] = pd.Series(dtype=np.int64)
            for c in DERIVED_FEATURES:
                empty[c] = pd.Series(dtype=float)
            return Panel(empty, tuple(panel.covariates) + DERIVED_FEATURES, lag=s)

    hist, cm, centroid = _history_features(f)
    source = f[["cell_id", "country_id", "month", "lon", "lat", *panel.covariates]].merge(
        hist, on=["cell_id", "month"], how="left"
    )
    source = source.merge(cm, on=["country_id", "month"], how="left")
    source = source.merge(centroid, left_on="country_id", right_index=True, how="left")
    source = source.rename(columns={"month": "source_month"})
    source["month"] = source["source_month"] + s

    targets = f[["cell_id", "month", *FATALITY_COLUMNS]]
    lagged = source.merge(targets, on=["cell_id", "month"], how="left")
    observed = lagged["sb_fatalities"].notna()
    keep = observed | (horizon & (lagged["month"] > hi))
    lagged = lagged.loc[keep].copy()

    overrides = [e for e in (spec or []) if e.lag_months is not None and e.name in panel.covariates]
    for e in overrides:
        if e.lag_months < s:
            raise ValueError(f"covariate {e.name!r} lag {e.lag_months} is shorter than the model lag {s}")
        if e.lag_months == s:
            continue
        extra = f[["cell_id", "month", e.name]].rename(columns={e.name: "_v", "month": "_src"})
        lagged["_src"] = lagged["month"] - e.lag_months
        lagged = lagged.drop(columns=[e.name]).merge(extra, on=["cell_id", "_src"], how="left")
        lagged = lagged.rename(columns={"_v": e.name}).drop(columns=["_src"])
        lagged = lagged.loc[lagged[e.name].notna() | ~lagged["sb_fatalities"].notna()]

    cols = (["cell_id", "country_id", "month", "source_month", *FATALITY_COLUMNS, "lon", "lat"]
            + list(panel.covariates) + list(DERIVED_FEATURES))
    lagged = lagged[cols]
    for c in FATALITY_COLUMNS:
        lagged[c] = lagged[c].astype(float)
    lagged = _sorted(lagged)
    if lagged.empty:
        warnings.warn(f"lag {s} leaves no rows", stacklevel=2)
    return Panel(lagged, tuple(panel.covariates) + DERIVED_FEATURES, lag=s)


class Split(NamedTuple):
    pre_train: Panel
    calibration: Panel
    train: Panel
    test: Panel
    periods: Periodisation


def split_periodisation(panel, t, s, epoch=None):
    """Expanding-window split of a lagged panel for test month ``t``.

    pre-train covers ``epoch .. t-s-1``, calibration is ``t-s``, train is
    ``epoch .. t-s`` and test is ``t``.
    """
    if epoch is None:
        epoch = panel.months[0]
        if epoch is None:
            raise PanelError("cannot split an empty panel")
    calib = t - s
    if calib - 1 < epoch:
        raise PanelError(
            f"insufficient history: pre-training would end at month {calib - 1}, before {epoch}"
        )
    periods = Periodisation(pre_train=(epoch, calib - 1), calibration=calib,
                            train=(epoch, calib), test=t)
    return Split(
        pre_train=panel.select_months(epoch, calib - 1),
        calibration=panel.select_months(calib, calib),
        train=panel.select_months(epoch, calib),
        test=panel.select_months(t, t),
        periods=periods,
    )


def country_months(panel):
    """Country-month aggregates of the state-based fatality counts."""
    g = panel.frame.groupby(["country_id", "month"], sort=True)["sb_fatalities"].sum()
    return [
        CountryMonth(int(c), int(m), int(v), bool(v > 0))
        for (c, m), v in g.items()
        if not np.isnan(v)
    ]
