import json

import numpy as np
import pytest
from scipy.linalg import cho_factor, cho_solve, toeplitz
from scipy.signal import lfilter

from edforecast import sarimax as sx
from edforecast.sarimax import SarimaxFit, SarimaxOrder


# --- independent oracles ----------------------------------------------------

def arma_acov(ar_poly, ma_poly, n, sigma2=1.0, n_psi=4000):
    """Autocovariances 0..n-1 from truncated psi weights."""
    impulse = np.zeros(n_psi)
    impulse[0] = 1.0
    psi = lfilter(ma_poly, ar_poly, impulse)
    return sigma2 * np.array([psi[: n_psi - k] @ psi[k:] for k in range(n)])


def polys(order, ar=(), ma=(), sar=(), sma=()):
    ar_full = np.convolve(sx.lag_poly(ar), sx.lag_poly(sar, order.s))
    ma_full = np.convolve(sx.lag_poly(ma), sx.lag_poly(sma, order.s))
    return ar_full, ma_full


def gaussian_loglik(u, cov):
    c = cho_factor(cov, lower=True)
    logdet = 2 * np.sum(np.log(np.diag(c[0])))
    return -0.5 * (u.size * np.log(2 * np.pi) + logdet + u @ cho_solve(c, u))


# --- differencing -----------------------------------------------------------

def test_difference_examples():
    assert sx.difference([1, 2, 3, 4], 1, 0).tolist() == [1, 1, 1]
    y = np.random.default_rng(0).normal(size=10)
    assert np.array_equal(sx.difference(y, 0, 0), y)
    assert sx.difference(np.arange(1, 10), 0, 1, 7).tolist() == [7, 7]
    with pytest.raises(ValueError):
        sx.difference([1, 2], 1, 1, 7)


def test_difference_linear_and_matches_integration_poly():
    rng = np.random.default_rng(1)
    y, z = rng.normal(size=50), rng.normal(size=50)
    for d, D in ((0, 1), (1, 1), (2, 0), (1, 2)):
        lhs = sx.difference(2.5 * y - 3 * z, d, D, 7)
        rhs = 2.5 * sx.difference(y, d, D, 7) - 3 * sx.difference(z, d, D, 7)
        assert np.allclose(lhs, rhs, atol=1e-12)
        c = sx.integration_coeffs(d, D, 7)
        k = c.size
        direct = np.array([y[t] - c @ y[t - np.arange(1, k + 1)] for t in range(k, 50)])
        assert np.allclose(sx.difference(y, d, D, 7), direct, atol=1e-12)


def test_pacf_transform_round_trip_and_stationarity():
    rng = np.random.default_rng(2)
    for k in range(1, 5):
        x = rng.normal(size=k)
        phi = sx.constrain(x)
        assert sx.is_stationary(phi)
        assert np.allclose(sx.unconstrain(phi), x, atol=1e-8)
    assert not sx.is_stationary([1.2])
    assert sx.is_stationary([])


# --- likelihood -------------------------------------------------------------

@pytest.mark.parametrize("order,params", [
    (SarimaxOrder(1, 0, 1, 0, 0, 1, 7), dict(ar=[0.6], ma=[0.3], sma=[0.5])),
    (SarimaxOrder(2, 0, 0, 1, 0, 0, 7), dict(ar=[0.5, -0.3], sar=[0.4])),
    (SarimaxOrder(0, 1, 2, 0, 1, 1, 7), dict(ma=[0.4, 0.2], sma=[0.5])),
])
def test_loglik_matches_covariance_oracle(order, params):
    rng = np.random.default_rng(3)
    n = 260
    y = sx.simulate(order, n, sigma2=1.7, seed=4, **params)
    X = rng.normal(size=(n, 2))
    beta = np.array([0.7, -1.1])
    y = y + X @ beta
    sigma2 = 1.3
    ll = sx.loglike(y, X, order, beta=beta, sigma2=sigma2, **params)
    w = sx.difference(y, order.d, order.D, order.s) - sx.difference(X, order.d, order.D, order.s) @ beta
    ar_full, ma_full = polys(order, **params)
    cov = toeplitz(arma_acov(ar_full, ma_full, w.size, sigma2))
    oracle = gaussian_loglik(w, cov)
    assert abs(ll - oracle) / w.size < 1e-6


def test_fitted_loglik_and_aic_consistent():
    order = SarimaxOrder(1, 0, 1, 0, 0, 0, 7)
    rng = np.random.default_rng(5)
    n = 300
    X = np.column_stack([np.ones(n), rng.normal(size=n)])
    y = sx.simulate(order, n, ar=[0.5], ma=[-0.3], seed=6) + X @ [3.0, 2.0]
    f = sx.fit(y, X, order, n_restarts=2)
    ar_full, ma_full = polys(order, f.ar, f.ma)
    u = y - X @ f.beta
    oracle = gaussian_loglik(u, toeplitz(arma_acov(ar_full, ma_full, n, f.sigma2)))
    assert abs(f.loglik - oracle) / n < 1e-6
    k = 2 + 2 + 1
    assert f.n_params == k
    assert f.aic == pytest.approx(2 * k - 2 * f.loglik, abs=1e-9)
    # the optimum beats nearby parameter values
    for d in (-0.05, 0.05):
        assert f.loglik >= sx.loglike(y, X, order, ar=f.ar + d, ma=f.ma) - 1e-8


def test_white_noise_constant_regression():
    rng = np.random.default_rng(7)
    y = rng.normal(4.0, 2.0, 500)
    f = sx.fit(y, np.ones((500, 1)), SarimaxOrder(0, 0, 0, 0, 0, 0, 7))
    assert f.beta[0] == pytest.approx(y.mean(), abs=1e-9)
    assert f.sigma2 == pytest.approx(y.var(), rel=1e-9)
    expected_ll = -0.5 * 500 * (np.log(2 * np.pi * y.var()) + 1)
    assert f.loglik == pytest.approx(expected_ll, rel=1e-12)


def test_perfect_regression():
    x = np.random.default_rng(8).normal(size=(200, 1))
    f = sx.fit(2 * x[:, 0], x, SarimaxOrder(0, 0, 0, 0, 0, 0, 7))
    assert f.beta[0] == pytest.approx(2.0, abs=1e-9)
    assert f.sigma2 < 1e-20


def test_exog_constant_dropped_after_differencing():
    rng = np.random.default_rng(9)
    n = 200
    X = np.column_stack([np.ones(n), rng.normal(size=n)])
    y = np.cumsum(rng.normal(size=n)) + 3 * X[:, 1]
    f = sx.fit(y, X, SarimaxOrder(0, 1, 0, 0, 0, 0, 7))
    assert f.exog_used.tolist() == [False, True]
    assert f.beta[0] == 0.0 and f.beta[1] == pytest.approx(3.0, abs=0.1)


def test_fit_artifact_round_trip():
    y = sx.simulate(SarimaxOrder(0, 1, 1, 0, 0, 0, 7), 120, ma=[0.3], seed=1)
    f = sx.fit(y, None, SarimaxOrder(0, 1, 1, 0, 0, 0, 7), n_restarts=1)
    g = SarimaxFit.from_dict(json.loads(json.dumps(f.to_dict())))
    assert np.array_equal(g.ma, f.ma) and g.aic == f.aic and g.order == f.order
    assert np.array_equal(sx.forecast(g, y), sx.forecast(f, y))


def test_too_short_series_rejected():
    with pytest.raises(ValueError):
        sx.fit(np.arange(10.0), None, SarimaxOrder(0, 1, 1, 0, 1, 1, 7))


# --- forecasting ------------------------------------------------------------

def _hand_fit(order, beta=(), ar=(), ma=(), sar=(), sma=()):
    a = lambda v: np.asarray(v, dtype=float)  # noqa: E731
    beta = a(beta)
    return SarimaxFit(order, a(ar), a(ma), a(sar), a(sma), beta, np.ones(beta.size, dtype=bool),
                      1.0, 0.0, 0.0, 0)


def test_forecast_constant_regression():
    f = _hand_fit(SarimaxOrder(0, 0, 0, 0, 0, 0, 7), beta=[5.0])
    out = sx.forecast(f, np.arange(30.0), np.ones((30, 1)), np.ones((7, 1)))
    assert out.tolist() == [5.0] * 7
    with pytest.raises(ValueError, match="exogenous"):
        sx.forecast(f, np.arange(30.0), np.ones((30, 1)), None)
    with pytest.raises(ValueError, match="exogenous"):
        sx.forecast(f, np.arange(30.0), np.ones((30, 1)), np.ones((3, 1)))


def test_random_walk_flat():
    f = _hand_fit(SarimaxOrder(0, 1, 0, 0, 0, 0, 7))
    y = np.r_[np.random.default_rng(0).normal(size=40), 12.0]
    assert sx.forecast(f, y).tolist() == [12.0] * 7


def test_ma2_memory_cutoff():
    order = SarimaxOrder(0, 0, 2, 0, 0, 0, 7)
    rng = np.random.default_rng(10)
    n = 150
    X = rng.normal(size=(n + 7, 2))
    f = _hand_fit(order, beta=[1.5, -0.5], ma=[0.4, 0.2])
    y = sx.simulate(order, n, ma=[0.4, 0.2], seed=3) + X[:n] @ f.beta
    out = sx.forecast(f, y, X[:n], X[n:])
    assert np.allclose(out[2:], X[n + 2:] @ f.beta, atol=1e-12)
    assert not np.allclose(out[:2], X[n:n + 2] @ f.beta)


def test_forecast_equals_gaussian_conditional_mean():
    order = SarimaxOrder(1, 0, 1, 0, 0, 1, 7)
    params = dict(ar=[0.6], ma=[0.3], sma=[0.5])
    f = _hand_fit(order, beta=[2.0], **params)
    n = 120
    X = np.ones((n + 7, 1))
    y = sx.simulate(order, n, seed=11, **params) + 2.0
    out = sx.forecast(f, y, X[:n], X[n:])
    ar_full, ma_full = polys(order, **params)
    g = arma_acov(ar_full, ma_full, n + 7)
    S = toeplitz(g)
    cond = S[n:, :n] @ np.linalg.solve(S[:n, :n], y - 2.0) + 2.0
    assert np.allclose(out, cond, atol=1e-9)


def test_integrated_forecast_matches_conditional_mean_of_differences():
    order = SarimaxOrder(0, 1, 1, 0, 1, 1, 7)
    params = dict(ma=[0.4], sma=[0.5])
    f = _hand_fit(order, **params)
    y = sx.simulate(order, 150, seed=12, **params)
    out = sx.forecast(f, y)
    w = sx.difference(y, 1, 1, 7)
    ar_full, ma_full = polys(order, **params)
    m = w.size
    S = toeplitz(arma_acov(ar_full, ma_full, m + 7))
    wf = S[m:, :m] @ np.linalg.solve(S[:m, :m], w)
    path = list(y)
    c = sx.integration_coeffs(1, 1, 7)
    for h in range(7):
        path.append(wf[h] + sum(c[j] * path[-1 - j] for j in range(c.size)))
    assert np.allclose(out, path[-7:], atol=1e-8)


def test_forecast_from_states_ignores_future_targets():
    order = SarimaxOrder(1, 1, 0, 0, 1, 1, 7)
    f = _hand_fit(order, ar=[0.3], sma=[0.4])
    y = sx.simulate(order, 100, ar=[0.3], sma=[0.4], seed=2)
    origins = [40, 60, 80]
    a = sx.forecast_from_states(f, y, None, origins)
    y2 = y.copy()
    y2[81:] += 100.0
    b = sx.forecast_from_states(f, y2, None, origins)
    assert np.array_equal(a, b)
    for row, t in enumerate(origins):
        assert np.allclose(a[row], sx.forecast(f, y[: t + 1]), atol=1e-10)


def test_rolling_one_step_uses_realized_values():
    order = SarimaxOrder(1, 0, 0, 0, 0, 0, 7)
    f = _hand_fit(order, ar=[0.5])
    y = np.random.default_rng(0).normal(size=60)
    r = sx.rolling_one_step(f, y, None, [30, 40])
    assert np.allclose(r[0], 0.5 * y[30:37])
    assert np.allclose(r[1], 0.5 * y[40:47])


# --- order selection --------------------------------------------------------

def test_single_order_search_space():
    y = sx.simulate(SarimaxOrder(0, 1, 1, 0, 0, 0, 7), 200, ma=[0.3], seed=1)
    only = SarimaxOrder(2, 1, 0, 0, 0, 1, 7)
    assert sx.select_order(y, None, [only]) == only
    with pytest.raises(ValueError):
        sx.select_order(y, None, [])


def test_default_space_contains_published_order():
    space = sx.default_search_space()
    assert len(space) == 324
    assert SarimaxOrder(0, 1, 2, 0, 1, 1, 7) in space


def test_selection_tie_breaks(monkeypatch):
    def fake_fit(y, X, order, n_restarts=1, seed=0):
        f = _hand_fit(order, ar=[0.0] * order.p, ma=[0.0] * order.q)
        return SarimaxFit(order, f.ar, f.ma, f.sar, f.sma, f.beta, f.exog_used, 1.0, 0.0, 10.0, 1)

    monkeypatch.setattr(sx, "fit", fake_fit)
    space = [SarimaxOrder(1, 0, 1, 0, 0, 0, 7), SarimaxOrder(0, 1, 1, 0, 0, 0, 7),
             SarimaxOrder(1, 0, 0, 0, 0, 0, 7), SarimaxOrder(0, 0, 1, 0, 0, 0, 7)]
    best, table = sx.select_order(np.zeros(50), None, space, return_table=True)
    # equal AIC: fewer parameters first, then lexicographic order
    assert best == SarimaxOrder(0, 0, 1, 0, 0, 0, 7)
    assert [r[0] for r in table][:3] == [SarimaxOrder(0, 0, 1, 0, 0, 0, 7), SarimaxOrder(0, 1, 1, 0, 0, 0, 7),
                                         SarimaxOrder(1, 0, 0, 0, 0, 0, 7)]


def test_selection_skips_failed_orders(monkeypatch):
    real = sx.fit

    def flaky(y, X, order, n_restarts=1, seed=0):
        if order.q:
            raise sx.SarimaxError("no convergence")
        return real(y, X, order, n_restarts=n_restarts, seed=seed)

    monkeypatch.setattr(sx, "fit", flaky)
    y = np.random.default_rng(0).normal(size=80)
    assert sx.select_order(y, None, [SarimaxOrder(0, 0, 1, 0, 0, 0, 7), SarimaxOrder(1, 0, 0, 0, 0, 0, 7)]).p == 1
    with pytest.raises(sx.SarimaxError, match="all candidate"):
        sx.select_order(y, None, [SarimaxOrder(0, 0, 1, 0, 0, 0, 7)])


@pytest.mark.slow
def test_ar1_selection_default_grid():
    y = sx.simulate(SarimaxOrder(1, 0, 0, 0, 0, 0, 7), 2000, ar=[0.8], seed=21)
    best = sx.select_order(y, np.ones((2000, 1)))
    assert best.p >= 1 and best.D == 0
