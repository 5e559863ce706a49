"""Domain types, dataset assembly and CSV ingestion.

Counts are stored as immutable ``int64`` numpy arrays, one value per
consecutive calendar day. Aggregate series (``Complexity.ALL`` and
``Ward.TOTAL``) are materialized whenever a dataset is assembled so that
downstream code can treat every series the same way.
"""

from __future__ import annotations

import csv
import json
import datetime as dt
import enum
import logging
import os
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

logger = logging.getLogger(__name__)


class DataError(ValueError):
    """Raised for malformed or inconsistent input data."""


class Ward(enum.Enum):
    EMERGENCY_MEDICINE = "EmergencyMedicine"
    GENERAL_MEDICINE = "GeneralMedicine"
    SURGERY = "Surgery"
    PAEDIATRIC = "Paediatric"
    PSYCHIATRY = "Psychiatry"
    CARDIOLOGY = "Cardiology"
    NEUROLOGY = "Neurology"
    OTHER = "Other"
    TOTAL = "TotalAllWards"

    @property
    def label(self) -> str:
        return _WARD_LABELS[self]


_WARD_LABELS = {
    Ward.EMERGENCY_MEDICINE: "Emergency Medicine",
    Ward.GENERAL_MEDICINE: "General Medicine",
    Ward.SURGERY: "Surgery",
    Ward.PAEDIATRIC: "Paediatric",
    Ward.PSYCHIATRY: "Psychiatry",
    Ward.CARDIOLOGY: "Cardiology",
    Ward.NEUROLOGY: "Neurology",
    Ward.OTHER: "Other",
    Ward.TOTAL: "Total Arrivals",
}

BASE_WARDS = tuple(w for w in Ward if w is not Ward.TOTAL)


class Complexity(enum.Enum):
    MAJOR = "Major"
    OTHER = "Other"
    ALL = "All"


BASE_COMPLEXITIES = (Complexity.MAJOR, Complexity.OTHER)


@dataclass(frozen=True)
class SeriesKey:
    ward: Ward
    complexity: Complexity

    def __lt__(self, other):
        return key_sort_index(self) < key_sort_index(other)

    @property
    def name(self) -> str:
        return f"{self.ward.value}_{self.complexity.value}"

    @property
    def is_derived(self) -> bool:
        return self.ward is Ward.TOTAL or self.complexity is Complexity.ALL

    @classmethod
    def parse(cls, name: str) -> "SeriesKey":
        ward, _, comp = name.rpartition("_")
        return cls(parse_ward(ward), parse_complexity(comp, allow_all=True))


def key_sort_index(key: SeriesKey) -> tuple[int, int]:
    return (list(Ward).index(key.ward), list(Complexity).index(key.complexity))


BASE_KEYS = tuple(SeriesKey(w, c) for w in BASE_WARDS for c in BASE_COMPLEXITIES)
ALL_KEYS = tuple(SeriesKey(w, c) for w in Ward for c in Complexity)
TOTAL_KEY = SeriesKey(Ward.TOTAL, Complexity.ALL)

# Normalized (lowercase, alphanumeric only) label -> enum member.
WARD_ALIASES: dict[str, Ward] = {
    "emergencymedicine": Ward.EMERGENCY_MEDICINE,
    "emergency": Ward.EMERGENCY_MEDICINE,
    "em": Ward.EMERGENCY_MEDICINE,
    "ed": Ward.EMERGENCY_MEDICINE,
    "generalmedicine": Ward.GENERAL_MEDICINE,
    "genmed": Ward.GENERAL_MEDICINE,
    "gm": Ward.GENERAL_MEDICINE,
    "surgery": Ward.SURGERY,
    "surgical": Ward.SURGERY,
    "paediatric": Ward.PAEDIATRIC,
    "paediatrics": Ward.PAEDIATRIC,
    "pediatric": Ward.PAEDIATRIC,
    "pediatrics": Ward.PAEDIATRIC,
    "psychiatry": Ward.PSYCHIATRY,
    "mentalhealth": Ward.PSYCHIATRY,
    "cardiology": Ward.CARDIOLOGY,
    "neurology": Ward.NEUROLOGY,
    "other": Ward.OTHER,
}

COMPLEXITY_ALIASES: dict[str, Complexity] = {
    "major": Complexity.MAJOR,
    "other": Complexity.OTHER,
    "intermediate": Complexity.OTHER,
    "minor": Complexity.OTHER,
    "all": Complexity.ALL,
}


def _normalize_label(text: str) -> str:
    return re.sub(r"[^a-z0-9]", "", text.strip().lower())


def parse_ward(text: str, allow_total: bool = True) -> Ward:
    norm = _normalize_label(text)
    if allow_total and norm in ("totalallwards", "total", "totalarrivals"):
        return Ward.TOTAL
    try:
        return WARD_ALIASES[norm]
    except KeyError:
        valid = ", ".join(w.value for w in BASE_WARDS)
        raise DataError(f"unknown ward label {text!r}; valid labels: {valid}") from None


def parse_complexity(text: str, allow_all: bool = False) -> Complexity:
    comp = COMPLEXITY_ALIASES.get(_normalize_label(text))
    if comp is None or (comp is Complexity.ALL and not allow_all):
        raise DataError(
            f"unknown complexity label {text!r}; valid labels: major, other "
            "(intermediate and minor map to other)"
        )
    return comp


def parse_date(text: str) -> dt.date:
    return dt.date.fromisoformat(text.strip())


def date_range(start: dt.date, n: int) -> list[dt.date]:
    return [start + dt.timedelta(days=i) for i in range(n)]


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.int64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class DailySeries:
    """Daily admission counts for one (ward, complexity) key.

    ``anomaly_window`` is an inclusive ``(first, last)`` date pair.
    """

    key: SeriesKey
    start: dt.date
    counts: np.ndarray
    anomaly_window: tuple[dt.date, dt.date] | None = None

    def __post_init__(self):
        counts = _frozen(self.counts)
        if counts.ndim != 1 or counts.size < 1:
            raise DataError(f"{self.key.name}: counts must be a non-empty 1-D sequence")
        if (counts < 0).any():
            raise DataError(f"{self.key.name}: counts must be non-negative")
        object.__setattr__(self, "counts", counts)
        if self.anomaly_window is not None:
            a, b = self.anomaly_window
            if not (self.start <= a <= b <= self.end):
                raise DataError(
                    f"{self.key.name}: anomaly window {a}..{b} outside {self.start}..{self.end}"
                )

    def __len__(self) -> int:
        return int(self.counts.size)

    @property
    def end(self) -> dt.date:
        return self.start + dt.timedelta(days=len(self) - 1)

    @property
    def dates(self) -> list[dt.date]:
        return date_range(self.start, len(self))

    def index_of(self, day: dt.date) -> int:
        return (day - self.start).days

    def window_mask(self) -> np.ndarray:
        """Boolean mask of the anomaly window (all False when unset)."""
        mask = np.zeros(len(self), dtype=bool)
        if self.anomaly_window is not None:
            a, b = self.anomaly_window
            mask[self.index_of(a): self.index_of(b) + 1] = True
        return mask

    def replace(self, **changes) -> "DailySeries":
        fields = dict(key=self.key, start=self.start, counts=self.counts,
                      anomaly_window=self.anomaly_window)
        fields.update(changes)
        return DailySeries(**fields)


def slice_series(series: DailySeries, start: dt.date, stop: dt.date) -> DailySeries:
    """Return the inclusive sub-range ``[start, stop]`` of ``series``."""
    if start > stop or start < series.start or stop > series.end:
        raise DataError(
            f"slice {start}..{stop} outside {series.key.name} range {series.start}..{series.end}"
        )
    i, j = series.index_of(start), series.index_of(stop) + 1
    window = series.anomaly_window
    if window is not None:
        a, b = max(window[0], start), min(window[1], stop)
        window = (a, b) if a <= b else None
    return DailySeries(series.key, start, series.counts[i:j], window)


@dataclass(frozen=True, eq=False)
class CovariateTable:
    """Per-date weather summaries and public-holiday flags."""

    start: dt.date
    tmax: np.ndarray
    tmin: np.ndarray
    wind_mean: np.ndarray
    precip_total: np.ndarray
    is_holiday: np.ndarray

    def __post_init__(self):
        n = len(self.tmax)
        for name in ("tmax", "tmin", "wind_mean", "precip_total"):
            arr = np.array(getattr(self, name), dtype=float)
            if arr.shape != (n,):
                raise DataError(f"covariate column {name} has wrong length")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        hol = np.array(self.is_holiday, dtype=bool)
        hol.setflags(write=False)
        object.__setattr__(self, "is_holiday", hol)
        bad = np.flatnonzero(self.tmax < self.tmin)
        if bad.size:
            raise DataError(f"tmax < tmin at {self.start + dt.timedelta(days=int(bad[0]))}")
        if (self.precip_total < 0).any():
            raise DataError("precip_total must be non-negative")

    def __len__(self) -> int:
        return int(self.tmax.size)

    @property
    def end(self) -> dt.date:
        return self.start + dt.timedelta(days=len(self) - 1)

    @property
    def dates(self) -> list[dt.date]:
        return date_range(self.start, len(self))

    def covers(self, start: dt.date, end: dt.date) -> bool:
        return self.start <= start and end <= self.end

    def aligned(self, start: dt.date, n: int) -> "CovariateTable":
        """Sub-table for ``n`` days from ``start``; raises when not covered."""
        end = start + dt.timedelta(days=n - 1)
        if not self.covers(start, end):
            raise DataError(
                f"covariates {self.start}..{self.end} do not cover {start}..{end}"
            )
        i = (start - self.start).days
        sl = slice(i, i + n)
        return CovariateTable(start, self.tmax[sl], self.tmin[sl], self.wind_mean[sl],
                              self.precip_total[sl], self.is_holiday[sl])


@dataclass(frozen=True, eq=False)
class Dataset:
    series: Mapping[SeriesKey, DailySeries]
    covariates: CovariateTable | None = None
    diagnostics: tuple[str, ...] = field(default=(), compare=False)

    def __getitem__(self, key: SeriesKey) -> DailySeries:
        return self.series[key]

    def keys(self) -> list[SeriesKey]:
        return sorted(self.series)

    @property
    def start(self) -> dt.date:
        return next(iter(self.series.values())).start

    @property
    def n_days(self) -> int:
        return len(next(iter(self.series.values())))

    def with_series(self, series: Mapping[SeriesKey, DailySeries]) -> "Dataset":
        return Dataset(dict(series), self.covariates, self.diagnostics)

    def with_covariates(self, covariates: CovariateTable) -> "Dataset":
        if not covariates.covers(self.start, self.start + dt.timedelta(days=self.n_days - 1)):
            raise DataError("covariate table does not cover the dataset date range")
        return Dataset(dict(self.series), covariates, self.diagnostics)


def derive_aggregates(base: Mapping[SeriesKey, DailySeries]) -> dict[SeriesKey, DailySeries]:
    """Attach ``All`` and ``TotalAllWards`` series computed from the 16 base series."""
    missing = [k.name for k in BASE_KEYS if k not in base]
    if missing:
        raise DataError(f"missing base series: {', '.join(missing)}")
    ref = base[BASE_KEYS[0]]
    for k in BASE_KEYS:
        s = base[k]
        if s.start != ref.start or len(s) != len(ref):
            raise DataError(f"{k.name}: date range differs from {ref.key.name}")
    out = {k: base[k] for k in BASE_KEYS}
    window = ref.anomaly_window
    for w in BASE_WARDS:
        counts = base[SeriesKey(w, Complexity.MAJOR)].counts + base[SeriesKey(w, Complexity.OTHER)].counts
        out[SeriesKey(w, Complexity.ALL)] = DailySeries(SeriesKey(w, Complexity.ALL), ref.start, counts, window)
    for c in Complexity:
        counts = sum(out[SeriesKey(w, c)].counts for w in BASE_WARDS)
        out[SeriesKey(Ward.TOTAL, c)] = DailySeries(SeriesKey(Ward.TOTAL, c), ref.start, counts, window)
    return dict(sorted(out.items()))


def check_aggregation(dataset: Dataset, mask: np.ndarray | None = None) -> None:
    """Raise :class:`DataError` if an aggregation identity fails.

    ``mask`` optionally restricts the comparison to selected dates.
    """
    s = dataset.series
    sel = slice(None) if mask is None else np.asarray(mask, dtype=bool)
    for w in BASE_WARDS:
        lhs = s[SeriesKey(w, Complexity.ALL)].counts[sel]
        rhs = (s[SeriesKey(w, Complexity.MAJOR)].counts + s[SeriesKey(w, Complexity.OTHER)].counts)[sel]
        if not np.array_equal(lhs, rhs):
            raise DataError(f"{w.value}: All != Major + Other")
    for c in Complexity:
        lhs = s[SeriesKey(Ward.TOTAL, c)].counts[sel]
        rhs = sum(s[SeriesKey(w, c)].counts for w in BASE_WARDS)[sel]
        if not np.array_equal(lhs, rhs):
            raise DataError(f"TotalAllWards/{c.value}: total != sum over wards")


def ingest_admissions(path, schema: Mapping[str, str] | None = None) -> Dataset:
    """Read an admissions CSV into a dataset of daily counts.

    Rows are either one admission (``date,ward,complexity``) or a
    pre-aggregated count (``date,ward,complexity,count``). ``schema`` maps
    the logical names ``date``, ``ward``, ``complexity`` and ``count`` to
    the actual column headers. Rows with unparseable dates are skipped and
    reported in ``Dataset.diagnostics``; missing days become zeros.
    """
    cols = {"date": "date", "ward": "ward", "complexity": "complexity", "count": "count"}
    cols.update(schema or {})
    tallies: dict[SeriesKey, dict[dt.date, int]] = {k: {} for k in BASE_KEYS}
    diagnostics = []
    n_rows = 0
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for need in ("date", "ward", "complexity"):
            if cols[need] not in header:
                raise DataError(f"{path}: missing column {cols[need]!r}")
        has_count = cols["count"] in header
        for lineno, row in enumerate(reader, start=2):
            n_rows += 1
            try:
                day = parse_date(row[cols["date"]])
            except (ValueError, TypeError):
                msg = f"line {lineno}: unparseable date {row[cols['date']]!r}; row rejected"
                logger.warning(msg)
                diagnostics.append(msg)
                continue
            ward = parse_ward(row[cols["ward"]], allow_total=False)
            comp = parse_complexity(row[cols["complexity"]])
            count = 1
            if has_count and row[cols["count"]] not in (None, ""):
                count = int(row[cols["count"]])
                if count < 0:
                    raise DataError(f"line {lineno}: negative count")
            bucket = tallies[SeriesKey(ward, comp)]
            bucket[day] = bucket.get(day, 0) + count
    if n_rows == 0:
        raise DataError(f"{path}: no rows")
    days = [d for b in tallies.values() for d in b]
    if not days:
        raise DataError(f"{path}: no rows with valid dates")
    start, end = min(days), max(days)
    n = (end - start).days + 1
    base = {}
    for key, bucket in tallies.items():
        counts = np.zeros(n, dtype=np.int64)
        for day, c in bucket.items():
            counts[(day - start).days] += c
        base[key] = DailySeries(key, start, counts)
    return Dataset(derive_aggregates(base), None, tuple(diagnostics))


COVARIATE_HEADER = ["date", "tmax_c", "tmin_c", "wind_ms", "precip_mm", "is_holiday"]


def ingest_covariates(path) -> CovariateTable:
    records: dict[dt.date, tuple] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in COVARIATE_HEADER if c not in (reader.fieldnames or [])]
        if missing:
            raise DataError(f"{path}: missing columns {', '.join(missing)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                day = parse_date(row["date"])
            except ValueError:
                raise DataError(f"line {lineno}: unparseable date {row['date']!r}") from None
            if day in records:
                raise DataError(f"duplicate covariate date {day}")
            tmax, tmin = float(row["tmax_c"]), float(row["tmin_c"])
            if tmax < tmin:
                raise DataError(f"tmax < tmin at {day}")
            hol = row["is_holiday"].strip().lower()
            if hol not in ("0", "1", "true", "false"):
                raise DataError(f"line {lineno}: is_holiday must be 0 or 1")
            records[day] = (tmax, tmin, float(row["wind_ms"]), float(row["precip_mm"]),
                            hol in ("1", "true"))
    if not records:
        raise DataError(f"{path}: no rows")
    start, end = min(records), max(records)
    n = (end - start).days + 1
    gaps = [d for d in date_range(start, n) if d not in records]
    if gaps:
        shown = ", ".join(str(d) for d in gaps[:10])
        more = f" (+{len(gaps) - 10} more)" if len(gaps) > 10 else ""
        raise DataError(f"covariate gaps at {shown}{more}")
    cols = list(zip(*(records[d] for d in date_range(start, n))))
    return CovariateTable(start, *cols)


def write_covariates(table: CovariateTable, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COVARIATE_HEADER)
        for i, day in enumerate(table.dates):
            w.writerow([day.isoformat(), repr(float(table.tmax[i])), repr(float(table.tmin[i])),
                        repr(float(table.wind_mean[i])), repr(float(table.precip_total[i])),
                        int(table.is_holiday[i])])


def write_series_csv(series: DailySeries, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "count"])
        for day, c in zip(series.dates, series.counts):
            w.writerow([day.isoformat(), int(c)])


def read_series_csv(path, key: SeriesKey, anomaly_window=None) -> DailySeries:
    dates, counts = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            dates.append(parse_date(row["date"]))
            counts.append(int(row["count"]))
    if not dates:
        raise DataError(f"{path}: no rows")
    for a, b in zip(dates, dates[1:]):
        if (b - a).days != 1:
            raise DataError(f"{path}: dates not consecutive at {b}")
    return DailySeries(key, dates[0], counts, anomaly_window)


def dump_dataset(dataset: Dataset, directory) -> list[str]:
    """Write one ``<ward>_<complexity>.csv`` per series plus ``covariates.csv``."""
    os.makedirs(directory, exist_ok=True)
    written = []
    for key in dataset.keys():
        path = os.path.join(directory, f"{key.name}.csv")
        write_series_csv(dataset[key], path)
        written.append(path)
    if dataset.covariates is not None:
        path = os.path.join(directory, "covariates.csv")
        write_covariates(dataset.covariates, path)
        written.append(path)
    return written


def load_dataset(directory, anomaly_window=None, keys: Iterable[SeriesKey] | None = None) -> Dataset:
    """Read a canonical dump written by :func:`dump_dataset`.

    Only base series are read; aggregates are re-derived and compared
    against any aggregate files present.
    """
    if not os.path.isdir(directory):
        raise DataError(f"{directory}: not a directory")
    base = {}
    for key in BASE_KEYS:
        path = os.path.join(directory, f"{key.name}.csv")
        if not os.path.exists(path):
            raise DataError(f"{directory}: missing series file {key.name}.csv")
        base[key] = read_series_csv(path, key, anomaly_window)
    series = derive_aggregates(base)
    for key in ALL_KEYS:
        path = os.path.join(directory, f"{key.name}.csv")
        if key.is_derived and os.path.exists(path):
            stored = read_series_csv(path, key)
            if not np.array_equal(stored.counts, series[key].counts):
                raise DataError(f"{key.name}.csv disagrees with the sum of its components")
    cov_path = os.path.join(directory, "covariates.csv")
    covariates = ingest_covariates(cov_path) if os.path.exists(cov_path) else None
    ds = Dataset(series, None)
    if covariates is not None:
        ds = ds.with_covariates(covariates)
    if keys is not None:
        ds = ds.with_series({k: ds[k] for k in keys})
    return ds


def write_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)
