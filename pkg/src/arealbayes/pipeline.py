"""Data ingestion, aggregation, transforms, and design-matrix assembly.

Turns raw event extracts (trips, crimes) and a per-area snapshot file into
validated area x time panels, applies variable transforms, and assembles
design matrices with optional intercept, scaled-day trend, and weekend
columns.
"""
from __future__ import annotations

import csv
import datetime as dt
import math
from dataclasses import dataclass, field

import numpy as np


class PipelineError(ValueError):
    """Raised for invalid panel data or transform domain violations."""


# Chicago-portal column defaults; all overridable.
DEFAULT_TRIP_TIMESTAMP_COL = "Trip Start Timestamp"
DEFAULT_TRIP_AREA_COL = "Pickup Community Area"
DEFAULT_CRIME_TIMESTAMP_COL = "Date"
DEFAULT_CRIME_AREA_COL = "Community Area"

TOTALS_SENTINEL = "2022"

# Mean month length in days; makes a scaled-day trend coefficient a
# per-month effect.
DEFAULT_TREND_DIVISOR = 30.44

_TIMESTAMP_FORMATS = (
    "%m/%d/%Y %I:%M:%S %p",
    "%Y-%m-%dT%H:%M:%S",
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%d",
)


@dataclass(frozen=True)
class TransformSpec:
    """Elementwise variable transform.

    kind: "none" | "log" | "log1p" | "logit".  clamp_epsilon bounds logit
    inputs away from 0 and 1.
    """

    kind: str = "none"
    clamp_epsilon: float = 1e-6

    def __post_init__(self):
        if self.kind not in ("none", "log", "log1p", "logit"):
            raise PipelineError(f"unknown transform kind: {self.kind!r}")
        if not (0.0 < self.clamp_epsilon < 0.5):
            raise PipelineError("clamp_epsilon must be in (0, 0.5)")


@dataclass
class AreaPanel:
    """Named variables over K areas and T time points.

    values maps variable name to a (K, T) array; T = 1 with dates=None is
    the totals (time-invariant) panel.  meta records the transform applied
    to each variable.
    """

    unit_ids: tuple
    dates: tuple | None
    values: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.unit_ids = tuple(self.unit_ids)
        if len(set(self.unit_ids)) != len(self.unit_ids):
            raise PipelineError("unit_ids must be unique")
        if self.dates is not None:
            self.dates = tuple(self.dates)
            if len(self.dates) == 0:
                raise PipelineError("dates may not be empty; use None for totals")
            for a, b in zip(self.dates, self.dates[1:]):
                if (b - a).days != 1:
                    raise PipelineError(
                        f"dates must be consecutive calendar days; gap between {a} and {b}"
                    )
        for name in list(self.values):
            self.values[name] = self._validate(name, self.values[name])

    @property
    def n_units(self) -> int:
        return len(self.unit_ids)

    @property
    def n_periods(self) -> int:
        return 1 if self.dates is None else len(self.dates)

    def _validate(self, name, arr):
        arr = np.asarray(arr, dtype=float)
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.shape != (self.n_units, self.n_periods):
            raise PipelineError(
                f"variable {name!r} has shape {arr.shape}, expected "
                f"({self.n_units}, {self.n_periods})"
            )
        if not np.all(np.isfinite(arr)):
            k, t = np.argwhere(~np.isfinite(arr))[0]
            raise PipelineError(
                f"variable {name!r} has non-finite value at area "
                f"{self.unit_ids[k]!r}, period {t}"
            )
        return arr

    def add(self, name, arr, transform: str = "none"):
        self.values[name] = self._validate(name, arr)
        self.meta[name] = transform

    def date_labels(self):
        if self.dates is None:
            return (TOTALS_SENTINEL,)
        return tuple(d.isoformat() for d in self.dates)


# ---------------------------------------------------------------------------
# Event aggregation


@dataclass
class AggregationReport:
    accepted: int = 0
    dropped_area: int = 0
    skipped: int = 0


def parse_timestamp(raw) -> dt.datetime:
    if isinstance(raw, dt.datetime):
        return raw
    if isinstance(raw, dt.date):
        return dt.datetime(raw.year, raw.month, raw.day)
    text = str(raw).strip()
    for fmt in _TIMESTAMP_FORMATS:
        try:
            return dt.datetime.strptime(text, fmt)
        except ValueError:
            continue
    raise ValueError(f"unparseable timestamp: {raw!r}")


def aggregate_events(records, unit_ids, granularity: str, start: dt.date, end: dt.date):
    """Count (timestamp, area_id) events per area, or per area per day.

    Records outside [start, end] or with an unknown area id are counted as
    dropped; unparseable timestamps are skipped with a counted warning, and
    more than 10% skipped is an error.  Returns (array, AggregationReport):
    a (K, 1) array for granularity "total", (K, T) for "daily".
    """
    if granularity not in ("total", "daily"):
        raise PipelineError(f"unknown granularity: {granularity!r}")
    if end < start:
        raise PipelineError("calendar span end precedes start")
    unit_ids = tuple(unit_ids)
    index = {u: k for k, u in enumerate(unit_ids)}
    # Tolerate string/int mismatches between portal files and graph ids.
    for u, k in list(index.items()):
        index.setdefault(str(u), k)
    T = (end - start).days + 1
    counts = np.zeros((len(unit_ids), T if granularity == "daily" else 1))
    report = AggregationReport()
    n_rows = 0
    for raw_ts, raw_area in records:
        n_rows += 1
        try:
            ts = parse_timestamp(raw_ts)
        except ValueError:
            report.skipped += 1
            continue
        day = ts.date()
        area = raw_area if raw_area in index else str(raw_area).strip()
        if area not in index or not (start <= day <= end):
            report.dropped_area += 1
            continue
        t = (day - start).days if granularity == "daily" else 0
        counts[index[area], t] += 1
        report.accepted += 1
    if n_rows and report.skipped > 0.1 * n_rows:
        raise PipelineError(
            f"{report.skipped} of {n_rows} rows had unparseable timestamps (>10%)"
        )
    return counts, report


def read_events_csv(path, timestamp_col, area_col):
    """Yield (timestamp, area_id) pairs from a portal-style CSV extract.

    Rows with an empty area field are yielded with area_id "" (and end up
    counted as dropped by aggregate_events).
    """
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or timestamp_col not in reader.fieldnames:
            raise PipelineError(f"{path}: missing column {timestamp_col!r}")
        if area_col not in reader.fieldnames:
            raise PipelineError(f"{path}: missing column {area_col!r}")
        for row in reader:
            yield row[timestamp_col], (row[area_col] or "").strip()


def read_snapshot_csv(path, id_col):
    """Read a one-row-per-area snapshot CSV into {column: {area_id: value}}."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or id_col not in reader.fieldnames:
            raise PipelineError(f"{path}: missing id column {id_col!r}")
        columns = {c: {} for c in reader.fieldnames if c != id_col}
        for row in reader:
            area = row[id_col].strip()
            for c in columns:
                text = (row[c] or "").strip()
                try:
                    columns[c][area] = float(text)
                except ValueError:
                    raise PipelineError(
                        f"{path}: non-numeric value {text!r} in column {c!r} for area {area!r}"
                    ) from None
    return columns


# ---------------------------------------------------------------------------
# Transforms


def apply_transform(values, spec: TransformSpec, name: str = "variable") -> np.ndarray:
    """Elementwise monotone transform with domain checking."""
    arr = np.asarray(values, dtype=float)
    if spec.kind == "none":
        return arr.copy()
    if spec.kind == "log":
        bad = np.argwhere(~(arr > 0))
        if bad.size:
            idx = tuple(bad[0])
            raise PipelineError(
                f"log transform of {name!r} requires positive values; "
                f"got {arr[idx]} at index {idx}"
            )
        return np.log(arr)
    if spec.kind == "log1p":
        bad = np.argwhere(~(arr >= 0))
        if bad.size:
            idx = tuple(bad[0])
            raise PipelineError(
                f"log1p transform of {name!r} requires non-negative values; "
                f"got {arr[idx]} at index {idx}"
            )
        return np.log1p(arr)
    # logit
    bad = np.argwhere(~((arr >= 0) & (arr <= 1)))
    if bad.size:
        idx = tuple(bad[0])
        raise PipelineError(
            f"logit transform of {name!r} requires values in [0, 1]; "
            f"got {arr[idx]} at index {idx}"
        )
    eps = spec.clamp_epsilon
    clamped = np.clip(arr, eps, 1.0 - eps)
    return np.log(clamped / (1.0 - clamped))


def inverse_transform(values, spec: TransformSpec) -> np.ndarray:
    """Analytic inverse of apply_transform (exact away from clamp bounds)."""
    arr = np.asarray(values, dtype=float)
    if spec.kind == "none":
        return arr.copy()
    if spec.kind == "log":
        return np.exp(arr)
    if spec.kind == "log1p":
        return np.expm1(arr)
    return 1.0 / (1.0 + np.exp(-arr))


def weekend_indicator(date: dt.date) -> int:
    """1 iff the date is a Saturday or Sunday."""
    return 1 if date.weekday() >= 5 else 0


def summarize(values):
    """(min, mean, median, max) of a non-empty array."""
    arr = np.asarray(values, dtype=float).ravel()
    if arr.size == 0:
        raise PipelineError("summarize requires a non-empty array")
    return (float(arr.min()), float(arr.mean()), float(np.median(arr)), float(arr.max()))


# ---------------------------------------------------------------------------
# Design matrices


def build_design(
    panel: AreaPanel,
    predictors,
    trend: str = "none",
    intercept: bool = True,
    trend_divisor: float = DEFAULT_TREND_DIVISOR,
    weekend: bool = False,
):
    """Assemble the (K, T, p) design array and its column names.

    Column 0 is all ones when intercept is set.  The trend column is
    (1-based day index) / trend_divisor; the weekend column applies
    weekend_indicator to the panel dates.  Zero-variance predictors (other
    than the intercept) are rejected.
    """
    if trend not in ("none", "scaled-day"):
        raise PipelineError(f"unknown trend kind: {trend!r}")
    K, T = panel.n_units, panel.n_periods
    columns, names = [], []
    if intercept:
        columns.append(np.ones((K, T)))
        names.append("Intercept")
    if trend == "scaled-day":
        if trend_divisor <= 0:
            raise PipelineError("trend_divisor must be positive")
        days = (np.arange(T, dtype=float) + 1.0) / trend_divisor
        columns.append(np.broadcast_to(days, (K, T)).copy())
        names.append("Daily Trend")
    if weekend:
        if panel.dates is None:
            raise PipelineError("weekend column requires a dated panel")
        wk = np.array([weekend_indicator(d) for d in panel.dates], dtype=float)
        columns.append(np.broadcast_to(wk, (K, T)).copy())
        names.append("Weekend Days")
    for name in predictors:
        if name not in panel.values:
            raise PipelineError(f"unknown predictor {name!r}")
        columns.append(panel.values[name])
        names.append(name)
    for col, name in zip(columns, names):
        if name != "Intercept" and np.ptp(col) == 0:
            raise PipelineError(f"zero-variance column {name!r}")
    X = np.stack(columns, axis=-1)
    return X, names


# ---------------------------------------------------------------------------
# Panel CSV IO (long format: area_id,date,variable,value)


def write_panel_csv(panel: AreaPanel, path):
    labels = panel.date_labels()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["area_id", "date", "variable", "value"])
        for name in panel.values:
            arr = panel.values[name]
            for k, unit in enumerate(panel.unit_ids):
                for t, label in enumerate(labels):
                    writer.writerow([unit, label, name, repr(float(arr[k, t]))])


def read_panel_csv(path) -> AreaPanel:
    cells = {}
    units, dates, variables = [], [], []
    unit_seen, date_seen, var_seen = set(), set(), set()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"area_id", "date", "variable", "value"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise PipelineError(f"{path}: expected columns {sorted(required)}")
        for row in reader:
            u, d, v = row["area_id"], row["date"], row["variable"]
            if u not in unit_seen:
                unit_seen.add(u)
                units.append(u)
            if d not in date_seen:
                date_seen.add(d)
                dates.append(d)
            if v not in var_seen:
                var_seen.add(v)
                variables.append(v)
            cells[(u, d, v)] = float(row["value"])
    if dates == [TOTALS_SENTINEL]:
        panel_dates = None
        labels = [TOTALS_SENTINEL]
    else:
        panel_dates = sorted(dt.date.fromisoformat(d) for d in dates)
        labels = [d.isoformat() for d in panel_dates]
    panel = AreaPanel(unit_ids=units, dates=panel_dates)
    for v in variables:
        arr = np.empty((len(units), len(labels)))
        for k, u in enumerate(units):
            for t, d in enumerate(labels):
                if (u, d, v) not in cells:
                    raise PipelineError(f"{path}: missing cell ({u}, {d}, {v})")
                arr[k, t] = cells[(u, d, v)]
        panel.add(v, arr)
    return panel
