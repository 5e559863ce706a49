import datetime as dt

import numpy as np
import pytest

from edforecast import synthgen
from edforecast.core import CovariateTable, DailySeries, SeriesKey


def make_covariates(start: dt.date, n: int, seed: int = 0, holidays=()) -> CovariateTable:
    rng = np.random.default_rng(seed)
    tmin = rng.normal(10, 3, n)
    flags = np.zeros(n, dtype=bool)
    for i in holidays:
        flags[i] = True
    return CovariateTable(start, tmin + rng.uniform(2, 10, n), tmin,
                          rng.lognormal(1, 0.3, n), rng.lognormal(0, 1, n), flags)


@pytest.fixture(scope="session")
def small_truth():
    cfg = synthgen.GeneratorConfig(start=dt.date(2019, 1, 1), n_days=400,
                                   anomaly=synthgen.AnomalySpec(dt.date(2019, 6, 1),
                                                                dt.date(2019, 6, 30), 0.5),
                                   seed=3)
    return synthgen.generate(cfg)


@pytest.fixture
def key():
    return SeriesKey.parse("Surgery_Major")


@pytest.fixture
def series_factory(key):
    def make(counts, start=dt.date(2020, 1, 1), window=None):
        return DailySeries(key, start, counts, window)
    return make


CRITERIA_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA_LINES):
            terminalreporter.write_line(CRITERIA_LINES[n])
