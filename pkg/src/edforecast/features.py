"""Per-date feature frames and 14-day-in / 7-day-out supervised windows."""

from __future__ import annotations

import csv
import datetime as dt
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import CovariateTable, DailySeries, DataError, date_range

logger = logging.getLogger(__name__)

INPUT_DAYS = 14
HORIZON = 7
WARMUP_DAYS = 14
HOLIDAY_CAP = 365

CALENDAR_FEATURES = ("dow", "month", "doy", "dow_sin", "dow_cos", "is_weekend")
HOLIDAY_FEATURES = ("is_holiday", "days_since_last_holiday")
WEATHER_FEATURES = ("tmax", "tmin", "wind_mean", "precip_total")
LAG_FEATURES = tuple(f"lag_{k}" for k in range(1, 8))
ROLLING_FEATURES = ("roll_mean_7", "roll_std_7", "roll_mean_14", "roll_std_14")

EXOGENOUS_FEATURES = CALENDAR_FEATURES + HOLIDAY_FEATURES + WEATHER_FEATURES
FULL_FEATURES = EXOGENOUS_FEATURES + LAG_FEATURES + ROLLING_FEATURES
# Regression columns used by SARIMAX: the cyclic weekday pair replaces the
# integer weekday, and trend-like calendar columns are left out.
SARIMAX_EXOG = ("dow_sin", "dow_cos", "is_weekend", "is_holiday") + WEATHER_FEATURES


@dataclass(frozen=True, eq=False)
class FeatureFrame:
    key: str
    dates: tuple
    names: tuple
    values: np.ndarray  # (n_dates, n_features)
    target: np.ndarray  # (n_dates,)

    def __len__(self) -> int:
        return len(self.dates)

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.names.index(name)]

    def select(self, names: Sequence[str]) -> np.ndarray:
        return self.values[:, [self.names.index(n) for n in names]]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["date", *self.names, "target"])
            for i, d in enumerate(self.dates):
                w.writerow([d.isoformat(), *(repr(float(v)) for v in self.values[i]),
                            repr(float(self.target[i]))])


def days_since_holiday(flags: np.ndarray, cap: int = HOLIDAY_CAP) -> np.ndarray:
    out = np.empty(flags.size, dtype=float)
    last = None
    for i, h in enumerate(flags):
        if h:
            last = i
        out[i] = cap if last is None else min(i - last, cap)
    return out


def _rolling(y: np.ndarray, w: int):
    """Trailing mean and population std over ``w`` days ending at t (inclusive)."""
    n = y.size
    mean = np.full(n, np.nan)
    std = np.full(n, np.nan)
    if n >= w:
        win = np.lib.stride_tricks.sliding_window_view(y, w)
        mean[w - 1:] = win.mean(axis=1)
        std[w - 1:] = win.std(axis=1)
    return mean, std


def build_frame(series: DailySeries, covariates: CovariateTable,
                include_autoregressive: bool = True, holiday_cap: int = HOLIDAY_CAP) -> FeatureFrame:
    """Calendar, holiday, weather and (optionally) lag/rolling features.

    Every feature at date t depends only on data up to and including t. The
    first ``WARMUP_DAYS`` dates are dropped.
    """
    n = len(series)
    if covariates is None:
        raise DataError("covariates are required to build features")
    cov = covariates.aligned(series.start, n)
    # holiday recency may look back before the series start
    hist = covariates.aligned(covariates.start, (series.start - covariates.start).days + n)
    since = days_since_holiday(hist.is_holiday, holiday_cap)[-n:]
    dates = series.dates
    dow = np.array([d.weekday() for d in dates], dtype=float)
    cols = {
        "dow": dow,
        "month": np.array([d.month for d in dates], dtype=float),
        "doy": np.array([d.timetuple().tm_yday for d in dates], dtype=float),
        "dow_sin": np.sin(2 * np.pi * dow / 7),
        "dow_cos": np.cos(2 * np.pi * dow / 7),
        "is_weekend": (dow >= 5).astype(float),
        "is_holiday": cov.is_holiday.astype(float),
        "days_since_last_holiday": since,
        "tmax": cov.tmax,
        "tmin": cov.tmin,
        "wind_mean": cov.wind_mean,
        "precip_total": cov.precip_total,
    }
    names = EXOGENOUS_FEATURES
    y = series.counts.astype(float)
    if include_autoregressive:
        for k in range(1, 8):
            lag = np.full(n, np.nan)
            lag[k:] = y[:-k]
            cols[f"lag_{k}"] = lag
        cols["roll_mean_7"], cols["roll_std_7"] = _rolling(y, 7)
        cols["roll_mean_14"], cols["roll_std_14"] = _rolling(y, 14)
        names = FULL_FEATURES
    values = np.column_stack([cols[c] for c in names])[WARMUP_DAYS:]
    if np.isnan(values).any():
        raise DataError(f"{series.key.name}: missing values after warm-up trimming")
    return FeatureFrame(series.key.name, tuple(dates[WARMUP_DAYS:]), tuple(names),
                        values, y[WARMUP_DAYS:])


@dataclass(frozen=True, eq=False)
class WindowSample:
    origin: dt.date
    X: np.ndarray  # (INPUT_DAYS, n_features), last row is the origin
    y: np.ndarray  # (HORIZON,), days origin+1 .. origin+7


@dataclass(frozen=True, eq=False)
class WindowSet(Sequence):
    """Stacked window samples; indexing yields :class:`WindowSample`."""

    key: str
    names: tuple
    origins: tuple
    X: np.ndarray  # (n, INPUT_DAYS, n_features)
    Y: np.ndarray  # (n, HORIZON)
    series_end: dt.date

    def __len__(self) -> int:
        return len(self.origins)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return self.take(np.arange(len(self))[i])
        return WindowSample(self.origins[i], self.X[i], self.Y[i])

    def take(self, idx) -> "WindowSet":
        idx = np.asarray(idx, dtype=int)
        return WindowSet(self.key, self.names, tuple(self.origins[i] for i in idx),
                         self.X[idx], self.Y[idx], self.series_end)

    def replace_arrays(self, X=None, Y=None) -> "WindowSet":
        return WindowSet(self.key, self.names, self.origins,
                         self.X if X is None else X, self.Y if Y is None else Y, self.series_end)

    def target_dates(self, i: int) -> list[dt.date]:
        return date_range(self.origins[i] + dt.timedelta(days=1), HORIZON)


def make_windows(frame: FeatureFrame, input_days: int = INPUT_DAYS,
                 horizon: int = HORIZON) -> WindowSet:
    """One sample per origin with stride 1; ``len(frame) - 20`` samples."""
    n = len(frame)
    count = n - input_days - horizon + 1
    end = frame.dates[-1] if n else None
    if count <= 0:
        logger.warning("%s: frame of length %d too short for windowing", frame.key, n)
        F = len(frame.names)
        return WindowSet(frame.key, frame.names, (), np.empty((0, input_days, F)),
                         np.empty((0, horizon)), end)
    X = np.lib.stride_tricks.sliding_window_view(frame.values, input_days, axis=0)
    X = np.ascontiguousarray(X.transpose(0, 2, 1)[:count])
    Y = np.lib.stride_tricks.sliding_window_view(frame.target, horizon)[input_days:input_days + count]
    origins = frame.dates[input_days - 1: input_days - 1 + count]
    return WindowSet(frame.key, frame.names, tuple(origins), X, np.ascontiguousarray(Y), end)


def chronological_split(samples: WindowSet, test_days: int = 180) -> tuple[WindowSet, WindowSet]:
    """Split by target date: test targets lie wholly in the final ``test_days``.

    Samples whose targets straddle the boundary are discarded.
    """
    if not len(samples):
        raise DataError("no samples to split")
    first = samples.origins[0] - dt.timedelta(days=INPUT_DAYS - 1)
    span = (samples.series_end - first).days + 1
    if test_days >= span:
        raise DataError(f"test_days={test_days} >= series length {span}")
    test_start = samples.series_end - dt.timedelta(days=test_days - 1)
    h = samples.Y.shape[1]
    train_idx, test_idx = [], []
    for i, origin in enumerate(samples.origins):
        first_target = origin + dt.timedelta(days=1)
        last_target = origin + dt.timedelta(days=h)
        if first_target >= test_start and last_target <= samples.series_end:
            test_idx.append(i)
        elif last_target < test_start:
            train_idx.append(i)
    return samples.take(train_idx), samples.take(test_idx)


STD_FLOOR = 1e-8


@dataclass(frozen=True, eq=False)
class StandardizationParams:
    feature_mean: np.ndarray
    feature_std: np.ndarray
    target_mean: np.ndarray
    target_std: np.ndarray

    @classmethod
    def fit(cls, train: WindowSet) -> "StandardizationParams":
        if not len(train):
            raise DataError("cannot standardize with an empty training set")
        flat = train.X.reshape(-1, train.X.shape[-1])
        return cls(flat.mean(axis=0), np.maximum(flat.std(axis=0), STD_FLOOR),
                   train.Y.mean(axis=0), np.maximum(train.Y.std(axis=0), STD_FLOOR))

    def transform_X(self, X):
        return (X - self.feature_mean) / self.feature_std

    def inverse_X(self, Z):
        return Z * self.feature_std + self.feature_mean

    def transform_y(self, Y):
        return (Y - self.target_mean) / self.target_std

    def inverse_y(self, Z):
        return Z * self.target_std + self.target_mean

    def apply(self, samples: WindowSet) -> WindowSet:
        return samples.replace_arrays(self.transform_X(samples.X), self.transform_y(samples.Y))

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in
                ("feature_mean", "feature_std", "target_mean", "target_std")}

    @classmethod
    def from_dict(cls, d) -> "StandardizationParams":
        return cls(*(np.asarray(d[k], dtype=float) for k in
                     ("feature_mean", "feature_std", "target_mean", "target_std")))


def standardize(train: WindowSet, test: WindowSet):
    """Z-score both partitions with training statistics.

    Returns ``(scaled_train, scaled_test, params)``.
    """
    params = StandardizationParams.fit(train)
    return params.apply(train), params.apply(test), params
