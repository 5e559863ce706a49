"""Counterfactual imputation of an anomalous window.

An additive model (piecewise-linear trend, weekly and yearly Fourier
terms, per-holiday offsets) is fitted by ridge regression on dates outside
the window. Inside the window each count is replaced by
``max(0, round(fit + eps))`` with ``eps ~ N(0, sigma^2)``, where ``sigma``
is the standard deviation of the in-sample residuals.
"""

from __future__ import annotations

import datetime as dt
import logging
from dataclasses import dataclass

import numpy as np

from .core import (BASE_KEYS, CovariateTable, DailySeries, Dataset, DataError,
                   derive_aggregates, key_sort_index)

logger = logging.getLogger(__name__)

YEAR_DAYS = 365.25


@dataclass(frozen=True)
class ImputerConfig:
    weekly_order: int = 3
    yearly_order: int = 10
    n_changepoints: int = 10
    ridge: float = 1.0
    sigma_ddof: int = 0  # population std of residuals
    sigma: float | None = None  # explicit override


@dataclass(frozen=True, eq=False)
class AdditiveModel:
    start: dt.date
    n_days: int
    config: ImputerConfig
    changepoints: np.ndarray  # day offsets from start
    holiday_keys: tuple  # (month, day) per holiday column
    coef: np.ndarray
    columns: tuple
    residual_sigma: float

    def design(self, covariates: CovariateTable | None = None) -> np.ndarray:
        return _design(self.start, self.n_days, self.config, self.changepoints,
                       self.holiday_keys, covariates)

    def fitted(self, covariates: CovariateTable | None = None) -> np.ndarray:
        return self.design(covariates) @ self.coef

    def component(self, prefix: str) -> np.ndarray:
        idx = [i for i, c in enumerate(self.columns) if c.startswith(prefix)]
        return self.coef[idx]

    @property
    def trend_slope(self) -> float:
        """Base slope in count units per day."""
        return float(self.coef[self.columns.index("trend_slope")]) / max(self.n_days - 1, 1)


@dataclass(frozen=True)
class ImputationReport:
    series: str
    window: tuple[str, str]
    n_replaced: int
    sigma: float
    seed: int

    def to_dict(self) -> dict:
        return {"series": self.series, "window": list(self.window),
                "n_replaced": self.n_replaced, "sigma": self.sigma, "seed": self.seed}


def _holiday_keys(start, n, covariates):
    if covariates is None:
        return ()
    cov = covariates.aligned(start, n)
    keys = {(d.month, d.day) for d, h in zip(cov.dates, cov.is_holiday) if h}
    return tuple(sorted(keys))


def _design(start, n, config, changepoints, holiday_keys, covariates):
    t = np.arange(n, dtype=float)
    scale = max(n - 1, 1)
    cols = [np.ones(n), t / scale]
    for c in changepoints:
        cols.append(np.maximum(t - c, 0.0) / scale)
    weekday0 = start.weekday()
    dow = (weekday0 + t) % 7
    for k in range(1, config.weekly_order + 1):
        cols.append(np.sin(2 * np.pi * k * dow / 7))
        cols.append(np.cos(2 * np.pi * k * dow / 7))
    ordinal = start.toordinal() + t
    for k in range(1, config.yearly_order + 1):
        cols.append(np.sin(2 * np.pi * k * ordinal / YEAR_DAYS))
        cols.append(np.cos(2 * np.pi * k * ordinal / YEAR_DAYS))
    if holiday_keys:
        cov = covariates.aligned(start, n)
        md = [(d.month, d.day) for d in cov.dates]
        for key in holiday_keys:
            cols.append(np.array([m == key and h for m, h in zip(md, cov.is_holiday)], dtype=float))
    return np.column_stack(cols)


def _column_names(config, changepoints, holiday_keys):
    names = ["trend_intercept", "trend_slope"]
    names += [f"trend_delta_{int(c)}" for c in changepoints]
    for k in range(1, config.weekly_order + 1):
        names += [f"weekly_sin_{k}", f"weekly_cos_{k}"]
    for k in range(1, config.yearly_order + 1):
        names += [f"yearly_sin_{k}", f"yearly_cos_{k}"]
    names += [f"holiday_{m:02d}-{d:02d}" for m, d in holiday_keys]
    return tuple(names)


def fit_additive(series: DailySeries, covariates: CovariateTable | None = None,
                 config: ImputerConfig = ImputerConfig()) -> AdditiveModel:
    """Ridge fit of the additive model on dates outside the anomaly window.

    The intercept and base slope are unpenalized; changepoint deltas,
    Fourier and holiday coefficients share the ridge penalty.
    """
    n = len(series)
    train = ~series.window_mask()
    if not train.any():
        raise DataError(f"{series.key.name}: anomaly window covers all data, nothing to fit on")
    if n - 1 < 2 * YEAR_DAYS:
        logger.info("%s: fewer than two years of data; yearly terms weakly identified", series.key.name)
    changepoints = np.linspace(0, n - 1, config.n_changepoints + 2)[1:-1]
    holiday_keys = _holiday_keys(series.start, n, covariates)
    X = _design(series.start, n, config, changepoints, holiday_keys, covariates)
    y = series.counts.astype(float)
    Xt, yt = X[train], y[train]
    penalty = np.full(X.shape[1], config.ridge)
    penalty[:2] = 0.0
    A = Xt.T @ Xt + np.diag(penalty)
    coef = np.linalg.lstsq(A, Xt.T @ yt, rcond=None)[0]
    resid = yt - Xt @ coef
    if config.sigma is not None:
        sigma = float(config.sigma)
    else:
        sigma = float(np.sqrt(np.sum(resid ** 2) / max(resid.size - config.sigma_ddof, 1)))
    return AdditiveModel(series.start, n, config, changepoints, holiday_keys, coef,
                         _column_names(config, changepoints, holiday_keys), sigma)


def round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def impute_window(series: DailySeries, model: AdditiveModel, seed: int,
                  covariates: CovariateTable | None = None) -> tuple[DailySeries, ImputationReport]:
    """Replace anomaly-window counts with stochastic counterfactual draws."""
    if series.anomaly_window is None:
        raise DataError(f"{series.key.name}: no anomaly window set")
    if model.start != series.start or model.n_days != len(series):
        raise DataError(f"{series.key.name}: model was fitted on a different date range")
    mask = series.window_mask()
    yhat = model.fitted(covariates)[mask]
    rng = np.random.default_rng(seed)
    eps = rng.normal(0.0, 1.0, yhat.size) * model.residual_sigma
    draws = np.maximum(0.0, round_half_away(yhat + eps)).astype(np.int64)
    counts = series.counts.copy()
    counts[mask] = draws
    a, b = series.anomaly_window
    report = ImputationReport(series.key.name, (a.isoformat(), b.isoformat()),
                              int(mask.sum()), model.residual_sigma, int(seed))
    return series.replace(counts=counts), report


def series_seed(seed: int, key) -> int:
    """Per-series substream seed derived from a run seed."""
    a, b = key_sort_index(key)
    return int(np.random.SeedSequence([seed, a, b]).generate_state(1)[0])


def impute_dataset(dataset: Dataset, window: tuple[dt.date, dt.date], seed: int,
                   config: ImputerConfig = ImputerConfig()) -> tuple[Dataset, list[ImputationReport], dict]:
    """Impute every base series and re-derive aggregates.

    Returns the new dataset, one report per base series and the fitted
    models keyed by series.
    """
    reports, models, base = [], {}, {}
    for key in BASE_KEYS:
        s = dataset[key].replace(anomaly_window=window)
        model = fit_additive(s, dataset.covariates, config)
        new, report = impute_window(s, model, series_seed(seed, key), dataset.covariates)
        base[key], models[key] = new, model
        reports.append(report)
    return dataset.with_series(derive_aggregates(base)), reports, models
