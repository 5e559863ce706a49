"""Grid search with a chronological validation split.

Each configuration is trained on the earlier 80% of the training windows
and scored by validation MAE averaged over the seven horizons.
"""

from __future__ import annotations

import csv
import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import gbt as gbt_mod
from . import lstm as lstm_mod
from .features import WindowSet

logger = logging.getLogger(__name__)

GBT_GRID = {"n_trees": (100, 300, 500), "learning_rate": (0.01, 0.05, 0.1), "max_depth": (3, 6, 9)}
LSTM_GRID = {
    "hidden_size": (16, 32, 64, 128),
    "n_layers": (1, 2, 3),
    "dropout_p": (0.1, 0.2, 0.3),
    "dense_units": (16, 32, 64, 128),
    "learning_rate": (0.0001, 0.001, 0.01),
    "batch_size": (8, 16, 32, 64, 128),
}


@dataclass(frozen=True)
class SearchSpace:
    kind: str  # "gbt" or "lstm"
    grid: dict
    base: dict = field(default_factory=dict)  # fixed settings applied to every config

    def __post_init__(self):
        if self.kind not in ("gbt", "lstm"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if not self.grid or any(len(v) == 0 for v in self.grid.values()):
            raise ValueError("search space is empty")

    @classmethod
    def default(cls, kind: str, **base) -> "SearchSpace":
        return cls(kind, dict(GBT_GRID if kind == "gbt" else LSTM_GRID), base)

    @property
    def size(self) -> int:
        return math.prod(len(v) for v in self.grid.values())

    def configs(self) -> list[dict]:
        names = list(self.grid)
        return [dict(zip(names, combo)) for combo in itertools.product(*(self.grid[n] for n in names))]

    def build(self, params: dict):
        merged = {**self.base, **params}
        return gbt_mod.GbtConfig(**merged) if self.kind == "gbt" else lstm_mod.LstmConfig(**merged)


def capacity(kind: str, params: dict, n_features: int = 23) -> float:
    """Rough model size used to break score ties toward smaller models."""
    if kind == "gbt":
        cfg = gbt_mod.GbtConfig(**{k: v for k, v in params.items() if k in gbt_mod.GbtConfig.__dataclass_fields__})
        return cfg.n_trees * (2 ** (cfg.max_depth + 1) - 1)
    cfg = lstm_mod.LstmConfig(**{k: v for k, v in params.items() if k in lstm_mod.LstmConfig.__dataclass_fields__})
    H, D = cfg.hidden_size, cfg.dense_units
    rec = sum(4 * H * ((n_features if l == 0 else H) + H + 1) for l in range(cfg.n_layers))
    return rec + H * D + D + D * 7 + 7


@dataclass(frozen=True)
class TrialResult:
    params: dict
    val_mae: float  # +inf on failure
    horizon_mae: tuple
    capacity: float
    error: str = ""


@dataclass(frozen=True)
class TuneResult:
    kind: str
    trials: tuple  # ranked, best first

    @property
    def winner(self) -> TrialResult:
        return self.trials[0]

    def write_leaderboard(self, path) -> None:
        names = list(self.trials[0].params) if self.trials else []
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["rank", *names, "val_mae", *(f"mae_h{h}" for h in range(1, 8)), "error"])
            for rank, t in enumerate(self.trials, 1):
                hm = list(t.horizon_mae) if t.horizon_mae else [""] * 7
                w.writerow([rank, *(t.params[n] for n in names), repr(t.val_mae),
                            *(repr(x) if x != "" else "" for x in hm), t.error])


def validation_split(train_windows: WindowSet, fraction: float = 0.2):
    n = len(train_windows)
    n_val = max(1, int(round(fraction * n)))
    if n - n_val < 2:
        raise ValueError("too few training windows for a validation split")
    idx = np.arange(n)
    return train_windows.take(idx[: n - n_val]), train_windows.take(idx[n - n_val:])


def evaluate_config(space: SearchSpace, params: dict, fit_part: WindowSet, val_part: WindowSet) -> TrialResult:
    cap = math.inf
    try:
        cfg = space.build(params)
        cap = capacity(space.kind, {**space.base, **params}, fit_part.X.shape[-1])
        if space.kind == "gbt":
            pred = gbt_mod.fit_multistep(fit_part, cfg).predict_windows(val_part)
        else:
            pred = lstm_mod.fit(fit_part, cfg).predict_windows(val_part)
        if not np.all(np.isfinite(pred)):
            raise ValueError("non-finite validation forecasts")
    except (ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
        logger.warning("config %s failed: %s", params, exc)
        return TrialResult(params, math.inf, (), cap, f"{type(exc).__name__}: {exc}")
    hm = tuple(float(x) for x in np.mean(np.abs(pred - val_part.Y), axis=0))
    return TrialResult(params, float(np.mean(hm)), hm, cap)


def _rank_key(t: TrialResult):
    return (t.val_mae, t.capacity, tuple(sorted((k, repr(v)) for k, v in t.params.items())))


def _eval_star(args):
    return evaluate_config(*args)


def grid_search(space: SearchSpace, train_windows: WindowSet, val_fraction: float = 0.2,
                n_jobs: int = 1) -> TuneResult:
    """Score every configuration; the winner has the lowest validation MAE.

    Ties go to the smaller model, then to the sorted parameter listing, so
    the result does not depend on grid order.
    """
    fit_part, val_part = validation_split(train_windows, val_fraction)
    jobs = [(space, p, fit_part, val_part) for p in space.configs()]
    if n_jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            trials = list(pool.map(_eval_star, jobs, chunksize=1))
    else:
        trials = [_eval_star(j) for j in jobs]
    return TuneResult(space.kind, tuple(sorted(trials, key=_rank_key)))


def space_to_dict(space: SearchSpace) -> dict:
    return {"kind": space.kind, "grid": {k: list(v) for k, v in space.grid.items()}, "base": dict(space.base)}


def trial_to_dict(t: TrialResult) -> dict:
    d = asdict(t)
    d["horizon_mae"] = list(t.horizon_mae)
    d["val_mae"] = None if math.isinf(t.val_mae) else t.val_mae
    d["capacity"] = None if math.isinf(t.capacity) else t.capacity
    return d
