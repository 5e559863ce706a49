import csv
import datetime as dt
import math

import numpy as np
import pytest

from edforecast import tuner
from edforecast.features import WindowSet
from edforecast.gbt import GbtConfig
from edforecast.lstm import LstmConfig
from edforecast.tuner import SearchSpace, grid_search


def _windows(n=120, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 2, 3))
    Y = np.where(X[:, -1, :1] > 0.2, 6.0, -2.0) + np.where(X[:, -1, 1:2] > 0, 1.0, 0.0) \
        + 0.05 * rng.normal(size=(n, 7))
    origins = tuple(dt.date(2020, 1, 1) + dt.timedelta(days=i) for i in range(n))
    return WindowSet("k", ("a", "b", "c"), origins, X, Y, origins[-1])


def test_published_grid_sizes_and_defaults():
    assert SearchSpace.default("gbt").size == 27 and len(SearchSpace.default("gbt").configs()) == 27
    assert SearchSpace.default("lstm").size == 4 * 3 * 3 * 4 * 3 * 5 == 2160
    assert tuner.GBT_GRID == {"n_trees": (100, 300, 500), "learning_rate": (0.01, 0.05, 0.1),
                              "max_depth": (3, 6, 9)}
    g = GbtConfig()
    assert (g.n_trees, g.learning_rate, g.max_depth) == (100, 0.05, 3)
    l = LstmConfig()
    assert (l.hidden_size, l.n_layers, l.dropout_p, l.dense_units, l.learning_rate, l.batch_size) == \
        (32, 2, 0.2, 128, 0.01, 64)
    for name, value in (("hidden_size", 32), ("n_layers", 2), ("dropout_p", 0.2), ("dense_units", 128),
                        ("learning_rate", 0.01), ("batch_size", 64)):
        assert value in tuner.LSTM_GRID[name]


def test_space_of_one_wins():
    res = grid_search(SearchSpace("gbt", {"n_trees": (3,)}), _windows())
    assert len(res.trials) == 1 and res.winner.params == {"n_trees": 3}
    with pytest.raises(ValueError):
        SearchSpace("gbt", {"n_trees": ()})


def test_deeper_model_wins_on_threshold_target():
    space = SearchSpace("gbt", {"max_depth": (0, 3)}, {"n_trees": 20, "learning_rate": 0.3})
    res = grid_search(space, _windows())
    assert res.winner.params == {"max_depth": 3}
    assert res.trials[0].val_mae < res.trials[1].val_mae


def test_scores_reproduce_from_validation_split():
    w = _windows()
    space = SearchSpace("gbt", {"n_trees": (2, 5)}, {"learning_rate": 0.5})
    res = grid_search(space, w)
    fit_part, val_part = tuner.validation_split(w)
    assert len(val_part) == 24 and val_part.origins[0] > fit_part.origins[-1]
    from edforecast.gbt import fit_multistep
    for t in res.trials:
        pred = fit_multistep(fit_part, space.build(t.params)).predict_windows(val_part)
        hm = np.mean(np.abs(pred - val_part.Y), axis=0)
        assert t.horizon_mae == tuple(hm) and t.val_mae == np.mean(hm)


def test_winner_invariant_to_grid_order_and_ties_prefer_smaller():
    w = _windows()
    # min_child_weight blocks every split, so all configs score equally
    base = {"min_child_weight": 1e9}
    a = grid_search(SearchSpace("gbt", {"n_trees": (7, 2, 4)}, base), w)
    b = grid_search(SearchSpace("gbt", {"n_trees": (4, 7, 2)}, base), w)
    assert a.winner.params == b.winner.params == {"n_trees": 2}
    assert len({t.val_mae for t in a.trials}) == 1
    assert [t.params for t in a.trials] == [t.params for t in b.trials]


def test_failures_score_infinity(tmp_path):
    space = SearchSpace("gbt", {"learning_rate": (0.5, 2.0)}, {"n_trees": 2})
    res = grid_search(space, _windows())
    bad = res.trials[-1]
    assert math.isinf(bad.val_mae) and "learning_rate" in bad.error
    res.write_leaderboard(tmp_path / "lb.csv")
    rows = list(csv.reader(open(tmp_path / "lb.csv")))
    assert rows[0][:3] == ["rank", "learning_rate", "val_mae"]
    assert rows[1][0] == "1" and rows[2][2] == "inf"
    assert tuner.trial_to_dict(bad)["val_mae"] is None


def test_lstm_grid_search_and_parallel_identity():
    space = SearchSpace("lstm", {"hidden_size": (2, 4)}, {"dense_units": 4, "max_epochs": 2, "seed": 1})
    w = _windows(n=40)
    a = grid_search(space, w)
    b = grid_search(space, w, n_jobs=2)
    assert a.trials == b.trials
    assert all(np.isfinite(t.val_mae) for t in a.trials)


def test_capacity_ordering():
    assert tuner.capacity("gbt", {"n_trees": 100, "max_depth": 3}) < tuner.capacity("gbt", {"n_trees": 100, "max_depth": 6})
    assert tuner.capacity("lstm", {"hidden_size": 16}) < tuner.capacity("lstm", {"hidden_size": 32})
