"""Synthetic admission datasets calibrated to published ward means.

Each of the 16 base series gets a latent daily rate

    rate_t = mean * weekly[dow] * (1 + A sin(2 pi doy / 365.25 + phase))
             * holiday_factor * exp(weather effects) * (1 - depth if anomalous)

and counts are drawn from a Poisson law, or a gamma-Poisson (negative
binomial) law with variance ``rate + dispersion * rate**2`` when
``dispersion > 0``.
"""

from __future__ import annotations

import datetime as dt
import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import (BASE_KEYS, BASE_WARDS, Complexity, CovariateTable, DailySeries,
                   Dataset, DataError, SeriesKey, Ward, date_range, derive_aggregates,
                   dump_dataset, parse_date, write_json)

# Average daily arrivals by ward: (major complexity, other complexity).
TABLE1_WARD_MEANS = {
    Ward.EMERGENCY_MEDICINE: (2.35, 12.82),
    Ward.GENERAL_MEDICINE: (5.92, 5.38),
    Ward.SURGERY: (2.58, 7.52),
    Ward.PAEDIATRIC: (0.85, 2.46),
    Ward.PSYCHIATRY: (0.66, 2.17),
    Ward.CARDIOLOGY: (0.78, 1.75),
    Ward.NEUROLOGY: (0.24, 0.45),
    Ward.OTHER: (3.00, 4.83),
}
TABLE1_TOTAL_MEAN = 53.70

# Monday..Sunday; mild Monday peak, quieter weekends.
DEFAULT_WEEKLY_PROFILE = (1.10, 1.03, 1.00, 1.00, 1.02, 0.92, 0.93)
DEFAULT_HOLIDAYS = ("01-01", "01-26", "04-25", "12-25", "12-26")
WEATHER_NAMES = ("tmax", "tmin", "wind_mean", "precip_total")
MIN_DAYS = 28


@dataclass(frozen=True)
class AnomalySpec:
    start: dt.date
    end: dt.date
    depth: float

    def __post_init__(self):
        if self.end < self.start:
            raise DataError("anomaly window end precedes start")
        if not 0.0 < self.depth <= 1.0:
            raise DataError("anomaly depth must lie in (0, 1]")


@dataclass(frozen=True)
class GeneratorConfig:
    start: dt.date = dt.date(2017, 1, 1)
    n_days: int = 1826
    ward_means: dict = field(default_factory=lambda: dict(TABLE1_WARD_MEANS))
    weekly_profile: tuple = DEFAULT_WEEKLY_PROFILE
    annual_amplitude: float = 0.05
    annual_phase: float = -math.pi / 2  # peak near day 183 (southern winter)
    holiday_effect: float = 0.92
    holidays: tuple = DEFAULT_HOLIDAYS
    weather_coeffs: dict = field(default_factory=lambda: {k: 0.0 for k in WEATHER_NAMES})
    anomaly: AnomalySpec | None = AnomalySpec(dt.date(2020, 3, 23), dt.date(2020, 6, 30), 0.5)
    dispersion: float = 0.02
    seed: int = 1

    def __post_init__(self):
        if self.n_days < MIN_DAYS:
            raise DataError(f"n_days={self.n_days} < {MIN_DAYS}: too short for windowing")
        if len(self.weekly_profile) != 7 or min(self.weekly_profile) <= 0:
            raise DataError("weekly_profile needs 7 positive factors")
        if abs(sum(self.weekly_profile) / 7 - 1.0) > 1e-9:
            raise DataError("weekly_profile factors must average to 1")
        for ward in BASE_WARDS:
            if ward not in self.ward_means:
                raise DataError(f"ward_means lacks {ward.value}")
            for m in self.ward_means[ward]:
                if m <= 0:
                    raise DataError(f"{ward.value}: means must be positive")
        if self.dispersion < 0:
            raise DataError("dispersion must be >= 0")
        if self.holiday_effect <= 0:
            raise DataError("holiday_effect must be positive")
        unknown = set(self.weather_coeffs) - set(WEATHER_NAMES)
        if unknown:
            raise DataError(f"unknown weather coefficients: {sorted(unknown)}")

    @property
    def end(self) -> dt.date:
        return self.start + dt.timedelta(days=self.n_days - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["start"] = self.start.isoformat()
        d["ward_means"] = {w.value: list(m) for w, m in self.ward_means.items()}
        d["weekly_profile"] = list(self.weekly_profile)
        d["holidays"] = list(self.holidays)
        if self.anomaly is not None:
            d["anomaly"] = {"start": self.anomaly.start.isoformat(),
                            "end": self.anomaly.end.isoformat(),
                            "depth": self.anomaly.depth}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        if "start" in d:
            d["start"] = parse_date(d["start"])
        if "ward_means" in d:
            d["ward_means"] = {Ward(k): tuple(float(x) for x in v) for k, v in d["ward_means"].items()}
        for name in ("weekly_profile", "holidays"):
            if name in d:
                d[name] = tuple(d[name])
        if "weather_coeffs" in d:
            coeffs = {k: 0.0 for k in WEATHER_NAMES}
            coeffs.update({k: float(v) for k, v in d["weather_coeffs"].items()})
            d["weather_coeffs"] = coeffs
        if d.get("anomaly") is not None:
            a = d["anomaly"]
            d["anomaly"] = AnomalySpec(parse_date(a["start"]), parse_date(a["end"]), float(a["depth"]))
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "GeneratorConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True, eq=False)
class SyntheticTruth:
    config: GeneratorConfig
    rates: dict  # SeriesKey -> latent daily rate (admissions/day)
    dataset: Dataset


def holiday_flags(dates, holidays) -> np.ndarray:
    wanted = {tuple(int(x) for x in h.split("-")) for h in holidays}
    return np.array([(d.month, d.day) in wanted for d in dates], dtype=bool)


def simulate_weather(dates, rng: np.random.Generator) -> dict:
    """Annual-sinusoid temperatures and log-normal wind/precipitation."""
    doy = np.array([d.timetuple().tm_yday for d in dates], dtype=float)
    n = doy.size
    # southern hemisphere: warmest mid-January
    season = np.cos(2 * np.pi * (doy - 15) / 365.25)
    tmax = 17.0 + 6.0 * season + rng.normal(0.0, 2.5, n)
    spread = 7.0 + 2.0 * season + np.abs(rng.normal(0.0, 2.0, n))
    tmin = tmax - spread
    wind = rng.lognormal(np.log(4.0), 0.4, n)
    rain = rng.random(n) < 0.35
    precip = np.where(rain, rng.lognormal(0.5, 1.0, n), 0.0)
    return {
        "tmax": np.round(tmax, 1),
        "tmin": np.round(tmin, 1),
        "wind_mean": np.round(wind, 1),
        "precip_total": np.round(precip, 1),
    }


def latent_rates(config: GeneratorConfig, covariates: CovariateTable) -> dict:
    dates = date_range(config.start, config.n_days)
    dow = np.array([d.weekday() for d in dates])
    doy = np.array([d.timetuple().tm_yday for d in dates], dtype=float)
    shape = np.asarray(config.weekly_profile, dtype=float)[dow]
    shape = shape * (1.0 + config.annual_amplitude * np.sin(2 * np.pi * doy / 365.25 + config.annual_phase))
    shape = shape * np.where(covariates.is_holiday, config.holiday_effect, 1.0)
    log_weather = np.zeros(config.n_days)
    for name in WEATHER_NAMES:
        coeff = config.weather_coeffs.get(name, 0.0)
        if coeff:
            x = getattr(covariates, name)
            log_weather += coeff * (x - x.mean())
    shape = shape * np.exp(log_weather)
    if config.anomaly is not None:
        a = (config.anomaly.start - config.start).days
        b = (config.anomaly.end - config.start).days
        shape[max(a, 0): b + 1] *= 1.0 - config.anomaly.depth
    rates = {}
    for key in BASE_KEYS:
        major, other = config.ward_means[key.ward]
        mean = major if key.complexity is Complexity.MAJOR else other
        rates[key] = mean * shape
    return rates


def _draw_counts(rate: np.ndarray, dispersion: float, rng: np.random.Generator) -> np.ndarray:
    if dispersion > 0:
        shape = 1.0 / dispersion
        rate = rng.gamma(shape, rate / shape)
    return rng.poisson(rate).astype(np.int64)


def generate(config: GeneratorConfig) -> SyntheticTruth:
    """Simulate covariates, latent rates and realized counts for all series."""
    dates = date_range(config.start, config.n_days)
    streams = np.random.SeedSequence(config.seed).spawn(1 + len(BASE_KEYS))
    weather = simulate_weather(dates, np.random.default_rng(streams[0]))
    covariates = CovariateTable(config.start, weather["tmax"], weather["tmin"],
                                weather["wind_mean"], weather["precip_total"],
                                holiday_flags(dates, config.holidays))
    rates = latent_rates(config, covariates)
    window = None
    if config.anomaly is not None:
        window = (max(config.anomaly.start, config.start), min(config.anomaly.end, config.end))
    base = {}
    for key, ss in zip(BASE_KEYS, streams[1:]):
        counts = _draw_counts(rates[key], config.dispersion, np.random.default_rng(ss))
        base[key] = DailySeries(key, config.start, counts, window)
    series = derive_aggregates(base)
    all_rates = dict(rates)
    for key in series:
        if key.is_derived:
            parts = [k for k in BASE_KEYS
                     if key.ward in (k.ward, Ward.TOTAL) and key.complexity in (k.complexity, Complexity.ALL)]
            all_rates[key] = sum(rates[k] for k in parts)
    return SyntheticTruth(config, all_rates, Dataset(series, covariates))


MANIFEST_NOTES = (
    "Only per-ward means are calibrated. Weekly profile, annual amplitude and phase, "
    "holiday effect, weather model and overdispersion are modeling choices."
)


def emit(truth: SyntheticTruth, directory) -> list[str]:
    """Write series CSVs, ``covariates.csv`` and ``manifest.json``."""
    try:
        os.makedirs(directory, exist_ok=True)
        written = dump_dataset(truth.dataset, directory)
        manifest = {
            "kind": "synthetic",
            "config": truth.config.to_dict(),
            "seed": truth.config.seed,
            "anomaly_window": _window_json(truth.dataset),
            "series": [k.name for k in truth.dataset.keys()],
            "notes": MANIFEST_NOTES,
        }
        path = os.path.join(directory, "manifest.json")
        write_json(manifest, path)
    except OSError as exc:
        raise DataError(f"cannot write to {directory}: {exc}") from exc
    return written + [path]


def _window_json(dataset: Dataset):
    window = next(iter(dataset.series.values())).anomaly_window
    return None if window is None else [window[0].isoformat(), window[1].isoformat()]
