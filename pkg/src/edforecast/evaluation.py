"""Seasonal-naive baseline, error metrics and the multi-run experiment harness.

MAPE excludes days with zero true arrivals; MAE does not. The harness fits
SARIMAX once per series, trains GBT once per series (training is
deterministic, so its per-seed rows are copies) and the LSTM once per seed.
"""

from __future__ import annotations

import csv
import datetime as dt
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import gbt as gbt_mod
from . import lstm as lstm_mod
from . import sarimax as sarimax_mod
from .core import (ALL_KEYS, BASE_WARDS, Complexity, DailySeries, Dataset, DataError,
                   SeriesKey, Ward, parse_date)
from .features import (HORIZON, SARIMAX_EXOG, FeatureFrame, WindowSet, build_frame,
                       chronological_split, make_windows)

logger = logging.getLogger(__name__)

MODEL_KINDS = ("lstm", "sarimax", "gbt", "baseline")
SINGLE_FIT = frozenset({"sarimax", "baseline"})
REPLICATED = frozenset({"gbt"})
TABLE_VIEWS = (Complexity.MAJOR, Complexity.ALL)
TABLE_ROWS = BASE_WARDS + (Ward.TOTAL,)
SARIMAX_MODES = ("multistep", "rolling_one_step")


class ModelError(RuntimeError):
    pass


# --- baseline and metrics -----------------------------------------------------

def seasonal_naive(history, origin=None, horizon: int = HORIZON) -> np.ndarray:
    """Same weekday one week earlier: ``yhat[h-1] = y[origin + h - 7]``.

    ``history`` is a count array (``origin`` an index, default the last
    one) or a :class:`DailySeries` (``origin`` a date).
    """
    if isinstance(history, DailySeries):
        idx = history.index_of(origin) if origin is not None else len(history) - 1
        y = history.counts
    else:
        y = np.asarray(history)
        idx = y.size - 1 if origin is None else int(origin)
    if horizon > 7:
        raise DataError("seasonal naive covers at most 7 days ahead")
    if idx < 6 or idx >= len(y):
        raise DataError(f"insufficient history: need 7 observed days up to the origin, have {idx + 1}")
    return np.asarray(y[idx - 6: idx - 6 + horizon], dtype=float)


@dataclass(frozen=True)
class ForecastRecord:
    series: str
    model: str
    seed: int
    origin: dt.date
    h: int
    y_true: float
    y_hat: float


def _arrays(y_true, y_hat):
    if y_hat is None:
        recs = list(y_true)
        return (np.array([r.y_true for r in recs], dtype=float),
                np.array([r.y_hat for r in recs], dtype=float))
    return np.asarray(y_true, dtype=float).ravel(), np.asarray(y_hat, dtype=float).ravel()


def mae(y_true, y_hat=None) -> float:
    """Mean absolute error of arrays, or of a record sequence when ``y_hat`` is omitted."""
    y, p = _arrays(y_true, y_hat)
    if y.size == 0:
        raise ValueError("MAE of an empty record set")
    return float(np.mean(np.abs(y - p)))


@dataclass(frozen=True)
class MapeResult:
    value: float  # percent; NaN when every true value is zero
    n_excluded: int

    @property
    def defined(self) -> bool:
        return not math.isnan(self.value)


def mape(y_true, y_hat=None) -> MapeResult:
    """Mean absolute percentage error over days with ``y_true > 0``."""
    y, p = _arrays(y_true, y_hat)
    keep = y > 0
    n_excl = int(np.sum(~keep))
    if not keep.any():
        return MapeResult(float("nan"), n_excl)
    return MapeResult(float(np.mean(np.abs(y[keep] - p[keep]) / y[keep]) * 100.0), n_excl)


# --- record log ---------------------------------------------------------------

RECORD_HEADER = ("series", "model", "seed", "origin", "h", "y_true", "y_hat")


def write_records(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_HEADER)
        for r in records:
            w.writerow([r.series, r.model, r.seed, r.origin.isoformat(), r.h,
                        repr(float(r.y_true)), repr(float(r.y_hat))])


def read_records(path) -> list[ForecastRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [ForecastRecord(r["series"], r["model"], int(r["seed"]), parse_date(r["origin"]),
                           int(r["h"]), float(r["y_true"]), float(r["y_hat"])) for r in rows]


def record_sort_key(r: ForecastRecord):
    key = SeriesKey.parse(r.series)
    return (key, MODEL_KINDS.index(r.model) if r.model in MODEL_KINDS else len(MODEL_KINDS),
            r.model, r.seed, r.origin, r.h)


# --- per-series preparation and model jobs ------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    models: tuple = ("lstm", "sarimax", "gbt")
    seeds: tuple = tuple(range(1, 11))
    test_days: int = 180
    gbt: gbt_mod.GbtConfig = gbt_mod.GbtConfig()
    lstm: lstm_mod.LstmConfig = lstm_mod.LstmConfig()
    sarimax_order: sarimax_mod.SarimaxOrder | None = None  # None: AIC selection per series
    sarimax_search: tuple | None = None  # None: default grid
    sarimax_restarts: int = 5
    select_restarts: int = 1
    sarimax_mode: str = "multistep"  # or "rolling_one_step"
    keys: tuple = ALL_KEYS

    def __post_init__(self):
        unknown = set(self.models) - set(MODEL_KINDS)
        if unknown:
            raise ValueError(f"unknown model kinds: {sorted(unknown)}")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.test_days < HORIZON:
            raise ValueError("test_days must cover at least one horizon")
        if self.sarimax_mode not in SARIMAX_MODES:
            raise ValueError(f"sarimax_mode must be one of {SARIMAX_MODES}")

    def to_dict(self) -> dict:
        return {
            "models": list(self.models), "seeds": list(self.seeds), "test_days": self.test_days,
            "gbt": asdict(self.gbt), "lstm": asdict(self.lstm),
            "sarimax_order": None if self.sarimax_order is None else list(self.sarimax_order.as_tuple()),
            "sarimax_search": None if self.sarimax_search is None
            else [list(o.as_tuple()) for o in self.sarimax_search],
            "sarimax_restarts": self.sarimax_restarts, "select_restarts": self.select_restarts,
            "sarimax_mode": self.sarimax_mode,
            "keys": [k.name for k in self.keys],
        }

    @classmethod
    def from_dict(cls, d) -> "ExperimentConfig":
        d = dict(d)
        if "models" in d:
            d["models"] = tuple(d["models"])
        if "seeds" in d:
            d["seeds"] = tuple(int(s) for s in d["seeds"])
        if "gbt" in d:
            d["gbt"] = gbt_mod.GbtConfig(**d["gbt"])
        if "lstm" in d:
            d["lstm"] = lstm_mod.LstmConfig(**d["lstm"])
        if d.get("sarimax_order") is not None:
            d["sarimax_order"] = sarimax_mod.SarimaxOrder(*d["sarimax_order"])
        if d.get("sarimax_search") is not None:
            d["sarimax_search"] = tuple(sarimax_mod.SarimaxOrder(*o) for o in d["sarimax_search"])
        if "keys" in d:
            d["keys"] = tuple(SeriesKey.parse(k) for k in d["keys"])
        return cls(**d)


@dataclass(frozen=True, eq=False)
class PreparedSeries:
    key: SeriesKey
    frame: FeatureFrame
    windows: WindowSet
    train: WindowSet
    test: WindowSet
    test_origin_idx: np.ndarray  # indices into frame dates
    n_train_dates: int  # frame dates strictly before the test range


def prepare_series(dataset: Dataset, key: SeriesKey, test_days: int = 180) -> PreparedSeries:
    frame = build_frame(dataset[key], dataset.covariates)
    windows = make_windows(frame)
    train, test = chronological_split(windows, test_days)
    if not len(train) or not len(test):
        raise DataError(f"{key.name}: empty train or test partition")
    pos = {d: i for i, d in enumerate(frame.dates)}
    origin_idx = np.array([pos[o] for o in test.origins], dtype=int)
    return PreparedSeries(key, frame, windows, train, test, origin_idx, len(frame) - test_days)


@dataclass(eq=False)
class SarimaxModel:
    fit: sarimax_mod.SarimaxFit
    selection: list = field(default_factory=list)  # (order, aic) rows when selected by AIC

    def predict_test(self, prep: PreparedSeries, mode: str = "multistep") -> np.ndarray:
        """7-step forecasts per test origin, or chained one-step forecasts."""
        X = prep.frame.select(self.fit.exog_names) if self.fit.exog_names else None
        if mode == "rolling_one_step":
            return sarimax_mod.rolling_one_step(self.fit, prep.frame.target, X,
                                                prep.test_origin_idx, HORIZON)
        return sarimax_mod.forecast_from_states(self.fit, prep.frame.target, X,
                                                prep.test_origin_idx, HORIZON)

    def to_dict(self) -> dict:
        return {"kind": "sarimax", "fit": self.fit.to_dict(),
                "selection": [[list(o), a] for o, a in self.selection]}

    @classmethod
    def from_dict(cls, d) -> "SarimaxModel":
        return cls(sarimax_mod.SarimaxFit.from_dict(d["fit"]),
                   [(tuple(o), a) for o, a in d.get("selection", [])])


def fit_sarimax(prep: PreparedSeries, config: ExperimentConfig) -> SarimaxModel:
    n = prep.n_train_dates
    y = prep.frame.target[:n]
    X = prep.frame.select(SARIMAX_EXOG)[:n]
    selection = []
    order = config.sarimax_order
    if order is None:
        order, table = sarimax_mod.select_order(y, X, config.sarimax_search,
                                                n_restarts=config.select_restarts, return_table=True)
        selection = [(o.as_tuple(), aic) for o, aic, _ in table]
    f = sarimax_mod.fit(y, X, order, n_restarts=config.sarimax_restarts, exog_names=SARIMAX_EXOG)
    return SarimaxModel(f, selection)


def train_model(kind: str, prep: PreparedSeries, config: ExperimentConfig, seed: int = 0):
    """Fit one model of ``kind``; ``None`` for the baseline, which has no state."""
    if kind == "baseline":
        return None
    if kind == "sarimax":
        return fit_sarimax(prep, config)
    if kind == "gbt":
        return gbt_mod.fit_multistep(prep.train, config.gbt)
    if kind == "lstm":
        return lstm_mod.fit(prep.train, lstm_mod.LstmConfig(**{**asdict(config.lstm), "seed": seed}))
    raise ValueError(f"unknown model kind {kind!r}")


def predict_test(kind: str, model, prep: PreparedSeries, sarimax_mode: str = "multistep") -> np.ndarray:
    if kind == "baseline":
        return np.stack([seasonal_naive(prep.frame.target, t) for t in prep.test_origin_idx])
    if kind == "sarimax":
        return model.predict_test(prep, sarimax_mode)
    pred = model.predict_windows(prep.test)
    if not np.all(np.isfinite(pred)):
        raise ModelError(f"{kind} produced non-finite forecasts")
    return pred


def model_to_dict(kind: str, model) -> dict:
    if kind == "baseline":
        return {"kind": "baseline"}
    return model.to_dict()


def model_from_dict(d: dict):
    kind = d["kind"]
    if kind == "baseline":
        return kind, None
    if kind == "sarimax":
        return kind, SarimaxModel.from_dict(d)
    if kind == "gbt":
        return kind, gbt_mod.MultistepGbt.from_dict(d)
    if kind == "lstm":
        return kind, lstm_mod.LstmModel.from_dict(d)
    raise ValueError(f"unknown model kind {kind!r}")


def make_records(prep: PreparedSeries, kind: str, seed: int, pred: np.ndarray) -> list[ForecastRecord]:
    out = []
    for i, origin in enumerate(prep.test.origins):
        for h in range(HORIZON):
            out.append(ForecastRecord(prep.key.name, kind, int(seed), origin, h + 1,
                                      float(prep.test.Y[i, h]), float(pred[i, h])))
    return out


@dataclass(frozen=True)
class Failure:
    series: str
    model: str
    seed: int
    error: str


@dataclass(frozen=True)
class Job:
    key: SeriesKey
    model: str
    seed: int  # 0 for models fitted once


def plan_jobs(config: ExperimentConfig, include_baseline: bool = True) -> list[Job]:
    """One job per (series, model, seed); single-fit models get seed 0."""
    kinds = list(config.models) + (["baseline"] if include_baseline and "baseline" not in config.models else [])
    jobs = []
    for key in config.keys:
        for kind in kinds:
            if kind == "lstm":
                jobs.extend(Job(key, kind, s) for s in config.seeds)
            else:
                jobs.append(Job(key, kind, 0))
    return jobs


def job_seeds(job: Job, config: ExperimentConfig) -> tuple:
    """Seeds a job's forecasts are recorded under."""
    if job.model in REPLICATED:
        return tuple(config.seeds)
    return (job.seed,)


_STATE: dict = {}


def _init_worker(dataset, config):
    _STATE["dataset"] = dataset
    _STATE["config"] = config
    _STATE["prepared"] = {}


def _prepared(key):
    cache = _STATE["prepared"]
    if key not in cache:
        cache.clear()
        cache[key] = prepare_series(_STATE["dataset"], key, _STATE["config"].test_days)
    return cache[key]


def _train_job(job: Job):
    """Worker body: returns ``(job, model_dict, error)``."""
    try:
        prep = _prepared(job.key)
        model = train_model(job.model, prep, _STATE["config"], job.seed)
        return job, model_to_dict(job.model, model), None
    except (DataError, ModelError, gbt_mod.GbtError, lstm_mod.LstmError,
            sarimax_mod.SarimaxError, ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
        logger.warning("%s/%s/seed %d failed: %s", job.key.name, job.model, job.seed, exc)
        return job, None, f"{type(exc).__name__}: {exc}"


def _job_cost(job: Job) -> int:
    return {"sarimax": 0, "gbt": 1, "lstm": 2, "baseline": 3}[job.model]


def run_jobs(func, jobs, dataset, config, n_jobs: int = 1):
    """Map ``func`` over jobs, in-process or on a process pool; order preserved."""
    if n_jobs <= 1 or len(jobs) <= 1:
        _init_worker(dataset, config)
        try:
            return [func(j) for j in jobs]
        finally:
            _STATE.clear()
    order = sorted(range(len(jobs)), key=lambda i: (_job_cost(jobs[i]), i))
    with ProcessPoolExecutor(max_workers=n_jobs, initializer=_init_worker,
                             initargs=(dataset, config)) as pool:
        results = list(pool.map(func, [jobs[i] for i in order], chunksize=1))
    out = [None] * len(jobs)
    for i, r in zip(order, results):
        out[i] = r
    return out


def train_all(dataset: Dataset, config: ExperimentConfig, n_jobs: int = 1):
    """Train every planned model; returns ``(models, failures)``.

    ``models`` maps ``Job`` to the serialized model dict.
    """
    jobs = plan_jobs(config)
    results = run_jobs(_train_job, jobs, dataset, config, n_jobs)
    models, failures = {}, []
    for job, model, err in results:
        if err is None:
            models[job] = model
        else:
            failures.extend(Failure(job.key.name, job.model, s, err) for s in job_seeds(job, config))
    return models, failures


def forecast_all(dataset: Dataset, config: ExperimentConfig, models: dict):
    """Test-set forecasts for every trained model; returns ``(records, failures)``."""
    records, failures = [], []
    by_key: dict = {}
    for job in models:
        by_key.setdefault(job.key, []).append(job)
    for key in sorted(by_key):
        prep = prepare_series(dataset, key, config.test_days)
        for job in sorted(by_key[key], key=lambda j: (MODEL_KINDS.index(j.model), j.seed)):
            kind, model = model_from_dict(models[job])
            try:
                pred = predict_test(kind, model, prep, config.sarimax_mode)
            except (DataError, ModelError, ValueError, sarimax_mod.SarimaxError,
                    gbt_mod.GbtError, lstm_mod.LstmError) as exc:
                failures.extend(Failure(key.name, kind, s, f"{type(exc).__name__}: {exc}")
                                for s in job_seeds(job, config))
                continue
            for s in job_seeds(job, config):
                records.extend(make_records(prep, kind, s, pred))
    records.sort(key=record_sort_key)
    return records, failures


# --- aggregation --------------------------------------------------------------

@dataclass(frozen=True)
class CellMetrics:
    series: str
    model: str
    seed: int
    mae: float
    mape: float
    n_excluded: int
    n_records: int


@dataclass(frozen=True)
class Aggregate:
    series: str
    model: str
    metric: str  # "mae" or "mape"
    mean: float
    median: float
    std: float | None  # None for models fitted once
    n_runs: int
    note: str = ""


def _agg_note(model: str) -> str:
    if model in REPLICATED:
        return "deterministic training; seed rows identical, std 0 by construction"
    if model in SINGLE_FIT:
        return "fitted once"
    return ""


@dataclass(eq=False)
class MetricsReport:
    cells: list
    aggregates: list
    failures: list = field(default_factory=list)

    def aggregate(self, series: str, model: str, metric: str) -> Aggregate | None:
        for a in self.aggregates:
            if a.series == series and a.model == model and a.metric == metric:
                return a
        return None

    def table_rows(self):
        """Rows in the wards-by-models layout, one per (view, ward, model, metric)."""
        models = sorted({a.model for a in self.aggregates},
                        key=lambda m: MODEL_KINDS.index(m) if m in MODEL_KINDS else 99)
        rows = []
        for view in TABLE_VIEWS:
            for ward in TABLE_ROWS:
                name = SeriesKey(ward, view).name
                for metric in ("mae", "mape"):
                    for model in models:
                        a = self.aggregate(name, model, metric)
                        if a is not None:
                            rows.append((view.value, ward.value, model, metric, a))
        return rows

    def write_cells_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["series", "model", "seed", "mae", "mape", "n_excluded_zero_days", "n_records"])
            for c in self.cells:
                w.writerow([c.series, c.model, c.seed, _fmt(c.mae), _fmt(c.mape),
                            c.n_excluded, c.n_records])

    def write_table_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["view", "ward", "model", "metric", "mean", "median", "std", "n_runs", "note"])
            for view, ward, model, metric, a in self.table_rows():
                w.writerow([view, ward, model, metric, _fmt(a.mean), _fmt(a.median),
                            "" if a.std is None else _fmt(a.std), a.n_runs, a.note])

    def to_json_dict(self) -> dict:
        out: dict = {}
        for view, ward, model, metric, a in self.table_rows():
            cell = out.setdefault(view, {}).setdefault(ward, {}).setdefault(model, {})
            cell[metric] = {"mean": _num(a.mean), "median": _num(a.median),
                            "std": None if a.std is None else _num(a.std), "n_runs": a.n_runs}
            if a.note:
                cell["note"] = a.note
        return {"tables": out,
                "failures": [asdict(f) for f in self.failures],
                "aggregation": "mean, median and sample std (ddof=1) over seeds"}


def _fmt(x) -> str:
    return "NA" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.6f}"


def _num(x):
    return None if x is None or math.isnan(x) else round(float(x), 6)


def _summarize(values, single: bool):
    v = np.asarray(values, dtype=float)
    v = v[~np.isnan(v)]
    if v.size == 0:
        return float("nan"), float("nan"), None if single else float("nan"), 0
    std = None if single else (float(np.std(v, ddof=1)) if v.size > 1 else 0.0)
    return float(np.mean(v)), float(np.median(v)), std, int(v.size)


def compute_metrics(records, failures=()) -> MetricsReport:
    """Per-(series, model, seed) MAE/MAPE and per-(series, model) aggregates."""
    groups: dict = {}
    for r in records:
        groups.setdefault((r.series, r.model, r.seed), []).append(r)
    cells = []
    for (series, model, seed), recs in sorted(groups.items(),
                                              key=lambda kv: record_sort_key(kv[1][0])[:4]):
        m = mape(recs)
        cells.append(CellMetrics(series, model, seed, mae(recs), m.value, m.n_excluded, len(recs)))
    by_sm: dict = {}
    for c in cells:
        by_sm.setdefault((c.series, c.model), []).append(c)
    aggregates = []
    for (series, model), cs in by_sm.items():
        single = model in SINGLE_FIT
        for metric in ("mae", "mape"):
            mean, median, std, n = _summarize([getattr(c, metric) for c in cs], single)
            aggregates.append(Aggregate(series, model, metric, mean, median, std, n, _agg_note(model)))
    return MetricsReport(cells, aggregates, list(failures))


@dataclass(frozen=True)
class ExperimentResult:
    records: list
    report: MetricsReport
    models: dict
    failures: list


def run_experiment(dataset: Dataset, config: ExperimentConfig = ExperimentConfig(),
                   n_jobs: int = 1) -> ExperimentResult:
    """Train, forecast and score every (series, model, seed) cell plus the baseline."""
    models, fail_train = train_all(dataset, config, n_jobs)
    records, fail_pred = forecast_all(dataset, config, models)
    failures = fail_train + fail_pred
    return ExperimentResult(records, compute_metrics(records, failures), models, failures)


# --- best / worst weeks -------------------------------------------------------

@dataclass(frozen=True)
class WeekResult:
    model: str
    best_origin: dt.date
    best_mae: float
    best_actual: tuple
    best_predicted: tuple
    worst_origin: dt.date
    worst_mae: float
    worst_actual: tuple
    worst_predicted: tuple


@dataclass(frozen=True)
class WeekDiagnostics:
    series: str
    seed: int
    models: tuple  # WeekResult per model

    def __getitem__(self, model: str) -> WeekResult:
        for m in self.models:
            if m.model == model:
                return m
        raise KeyError(model)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["series", "model", "week", "origin", "mae", "h", "actual", "predicted"])
            for m in self.models:
                for week in ("best", "worst"):
                    origin = getattr(m, f"{week}_origin")
                    for h, (a, p) in enumerate(zip(getattr(m, f"{week}_actual"),
                                                   getattr(m, f"{week}_predicted")), 1):
                        w.writerow([self.series, m.model, week, origin.isoformat(),
                                    _fmt(getattr(m, f"{week}_mae")), h, _fmt(a), _fmt(p)])


def week_diagnostics(records, series: str | None = None, seed: int = 1) -> WeekDiagnostics:
    """Per model, the test origins with the lowest and highest 7-day MAE.

    Models trained per seed use rows of ``seed``; models fitted once use
    their single run. Ties resolve to the earliest origin.
    """
    recs = [r for r in records if series is None or r.series == series]
    if not recs:
        raise DataError("no records for week diagnostics")
    series = series or recs[0].series
    out = []
    for model in sorted({r.model for r in recs},
                        key=lambda m: MODEL_KINDS.index(m) if m in MODEL_KINDS else 99):
        rs = [r for r in recs if r.model == model]
        seeds = sorted({r.seed for r in rs})
        use = seed if seed in seeds else seeds[0]
        weeks: dict = {}
        for r in rs:
            if r.seed == use:
                weeks.setdefault(r.origin, {})[r.h] = r
        origins = sorted(weeks)
        scores = [float(np.mean([abs(w.y_true - w.y_hat) for w in weeks[o].values()])) for o in origins]
        ib = int(np.argmin(scores))
        iw = int(np.argmax(scores))

        def vecs(o):
            hs = sorted(weeks[o])
            return (tuple(weeks[o][h].y_true for h in hs), tuple(weeks[o][h].y_hat for h in hs))

        ba, bp = vecs(origins[ib])
        wa, wp = vecs(origins[iw])
        out.append(WeekResult(model, origins[ib], scores[ib], ba, bp, origins[iw], scores[iw], wa, wp))
    return WeekDiagnostics(series, seed, tuple(out))


def default_jobs() -> int:
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:
        return max(1, os.cpu_count() or 1)
