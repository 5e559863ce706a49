"""Seasonal ARIMA with exogenous regressors.

The model is a regression with seasonal ARMA errors on the differenced
scale::

    phi(B) Phi(B^s) (w_t - beta' x~_t) = theta(B) Theta(B^s) eps_t

with ``w = (1-B)^d (1-B^s)^D y`` and ``x~`` the equally differenced
regressors. Polynomials use the ``1 - sum c_i B^i`` convention for both AR
and MA parts. The exact Gaussian likelihood is evaluated with a Kalman
filter on the ARMA state (stationary initialization); ``beta`` and the
innovation variance are profiled out by generalized least squares, so the
optimizer only sees the ARMA coefficients.
"""

from __future__ import annotations

import itertools
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.optimize import minimize
from scipy.signal import lfilter

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2 * math.pi)
TINY = np.finfo(float).tiny


class SarimaxError(RuntimeError):
    """Raised when estimation fails."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True, order=True)
class SarimaxOrder:
    p: int = 0
    d: int = 0
    q: int = 0
    P: int = 0
    D: int = 0
    Q: int = 0
    s: int = 7

    def __post_init__(self):
        if min(self.p, self.d, self.q, self.P, self.D, self.Q) < 0:
            raise ValueError(f"negative order in {self}")
        if self.s < 1:
            raise ValueError("seasonal period must be >= 1")

    @property
    def n_arma(self) -> int:
        return self.p + self.q + self.P + self.Q

    @property
    def n_diff(self) -> int:
        return self.d + self.D * self.s

    def check_length(self, n: int) -> None:
        need = self.n_diff + max(self.p, self.q) + self.s * max(self.P, self.Q)
        if need >= n:
            raise ValueError(f"series of length {n} too short for order {self}")

    def as_tuple(self):
        return (self.p, self.d, self.q, self.P, self.D, self.Q, self.s)

    def __str__(self):
        return f"({self.p},{self.d},{self.q})({self.P},{self.D},{self.Q})_{self.s}"


def difference(y, d: int = 0, D: int = 0, s: int = 1) -> np.ndarray:
    """Apply ``(1-B)^d (1-B^s)^D`` along the first axis."""
    out = np.asarray(y, dtype=float)
    if out.shape[0] <= d + D * s:
        raise ValueError(f"length {out.shape[0]} too short to difference with d={d}, D={D}, s={s}")
    for _ in range(D):
        out = out[s:] - out[:-s]
    for _ in range(d):
        out = out[1:] - out[:-1]
    return out


def integration_coeffs(d: int, D: int, s: int) -> np.ndarray:
    """``c`` such that ``(1-B)^d (1-B^s)^D = 1 - sum_j c[j-1] B^j``."""
    poly = np.array([1.0])
    for _ in range(d):
        poly = np.convolve(poly, [1.0, -1.0])
    seas = np.zeros(s + 1)
    seas[0], seas[s] = 1.0, -1.0
    for _ in range(D):
        poly = np.convolve(poly, seas)
    return -poly[1:]


def lag_poly(coefs, step: int = 1) -> np.ndarray:
    """Coefficients of ``1 - sum_i coefs[i] B^(step*(i+1))``."""
    poly = np.zeros(step * len(coefs) + 1)
    poly[0] = 1.0
    for i, c in enumerate(coefs):
        poly[step * (i + 1)] = -c
    return poly


# --- stationarity-enforcing reparameterization -----------------------------

def constrain(x) -> np.ndarray:
    """Map unconstrained reals to coefficients of a stationary polynomial."""
    x = np.asarray(x, dtype=float)
    r = x / np.sqrt(1.0 + x * x)
    phi = np.zeros(0)
    for rk in r:
        phi = np.append(phi - rk * phi[::-1], rk)
    return phi


def unconstrain(phi) -> np.ndarray:
    phi = np.array(phi, dtype=float)
    k = phi.size
    r = np.zeros(k)
    for j in range(k - 1, -1, -1):
        rk = phi[j]
        r[j] = rk
        if j:
            prev = phi[:j]
            phi = (prev + rk * prev[::-1]) / (1.0 - rk * rk)
    r = np.clip(r, -0.999999, 0.999999)
    return r / np.sqrt(1.0 - r * r)


def is_stationary(coefs) -> bool:
    if len(coefs) == 0:
        return True
    roots = np.roots(lag_poly(coefs)[::-1])
    return bool(np.all(np.abs(roots) > 1.0))


# --- Kalman filter kernel ---------------------------------------------------

@njit(cache=True)
def _initial_cov(phi, R):
    r = R.size
    A = np.zeros((r, r))
    for i in range(r):
        A[i, 0] = phi[i]
        if i < r - 1:
            A[i, i + 1] = 1.0
    P = np.outer(R, R)
    for _ in range(80):
        Pn = P + A @ P @ A.T
        A = A @ A
        delta = np.max(np.abs(Pn - P))
        P = Pn
        if delta <= 1e-14 * max(1.0, np.max(np.abs(P))) or np.max(np.abs(A)) < 1e-300:
            break
    return P


@njit(cache=True)
def _arma_filter(phi, R, W, store_states):
    """Innovations of every column of ``W`` under a unit-variance ARMA law.

    ``phi`` (padded AR coefficients) and ``R`` (1 followed by MA weights)
    define a companion-form state of dimension ``r``. Returns innovations
    ``V`` (n x m), their scaled variances ``F`` (n) and, when requested, the
    one-step predicted state of column 0 before each observation plus the
    final one (n+1 x r).
    """
    n, m = W.shape
    r = R.size
    P = _initial_cov(phi, R)
    a = np.zeros((m, r))  # one state row per column, contiguous in the state index
    V = np.empty((n, m))
    F = np.empty(n)
    K = np.zeros(r)
    Pn = np.empty((r, r))
    states = np.zeros((n + 1 if store_states else 0, r))
    steady = False
    f = 1.0
    for t in range(n):
        if not steady:
            f = P[0, 0]
            for i in range(r):
                nxt = P[i + 1, 0] if i < r - 1 else 0.0
                K[i] = (phi[i] * P[0, 0] + nxt) / f
        F[t] = f
        for j in range(m):
            aj = a[j]
            v = W[t, j] - aj[0]
            V[t, j] = v
            a0 = aj[0]
            for i in range(r - 1):
                aj[i] = phi[i] * a0 + aj[i + 1] + K[i] * v
            aj[r - 1] = phi[r - 1] * a0 + K[r - 1] * v
        if store_states:
            for i in range(r):
                states[t + 1, i] = a[0, i]
        if not steady:
            # P <- T P T' + R R' - f K K', companion structure, symmetric
            delta = 0.0
            scale = 1.0
            p00 = P[0, 0]
            for i in range(r):
                pi0 = P[i + 1, 0] if i < r - 1 else 0.0
                for j in range(i + 1):
                    pj0 = P[j + 1, 0] if j < r - 1 else 0.0
                    pij = P[i + 1, j + 1] if (i < r - 1 and j < r - 1) else 0.0
                    val = (phi[i] * phi[j] * p00 + phi[i] * pj0 + phi[j] * pi0 + pij
                           + R[i] * R[j] - f * K[i] * K[j])
                    Pn[i, j] = val
                    diff = abs(val - P[i, j])
                    if diff > delta:
                        delta = diff
                    if abs(val) > scale:
                        scale = abs(val)
            for i in range(r):
                for j in range(i + 1):
                    P[i, j] = Pn[i, j]
                    P[j, i] = Pn[i, j]
            if delta <= 1e-13 * scale:
                steady = True
    return V, F, states


def _state_polys(order: SarimaxOrder, ar, ma, sar, sma):
    ar_full = np.convolve(lag_poly(ar), lag_poly(sar, order.s))
    ma_full = np.convolve(lag_poly(ma), lag_poly(sma, order.s))
    r = max(ar_full.size - 1, ma_full.size, 1)
    phi = np.zeros(r)
    phi[: ar_full.size - 1] = -ar_full[1:]
    R = np.zeros(r)
    R[: ma_full.size] = ma_full
    return phi, R


def _split_params(order: SarimaxOrder, x):
    p, q, P, Q = order.p, order.q, order.P, order.Q
    i = 0
    blocks = []
    for k in (p, q, P, Q):
        blocks.append(constrain(x[i:i + k]))
        i += k
    return blocks  # ar, ma, sar, sma


@dataclass(frozen=True, eq=False)
class _Profile:
    loglik: float
    beta: np.ndarray
    sigma2: float
    n_obs: int


def _profile_loglik(order, ar, ma, sar, sma, W, sigma2=None, beta=None) -> _Profile:
    phi, R = _state_polys(order, ar, ma, sar, sma)
    V, F, _ = _arma_filter(phi, R, np.ascontiguousarray(W), False)
    n = V.shape[0]
    k = V.shape[1] - 1
    if not (np.all(np.isfinite(F)) and np.min(F) > 0 and np.all(np.isfinite(V))):
        return _Profile(-math.inf, np.zeros(k), math.nan, n)  # numerically degenerate parameters
    if k and beta is None:
        s = 1.0 / np.sqrt(F)
        Z = V[:, 1:] * s[:, None]
        try:  # normal equations; SVD only when they are singular
            beta = np.linalg.solve(Z.T @ Z, Z.T @ (V[:, 0] * s))
        except np.linalg.LinAlgError:
            beta = np.linalg.lstsq(Z, V[:, 0] * s, rcond=None)[0]
    elif not k:
        beta = np.zeros(0)
    u = V[:, 0] - V[:, 1:] @ beta
    ssr = float(np.sum(u * u / F))
    sumlogF = float(np.sum(np.log(F)))
    if sigma2 is None:
        sigma2 = max(ssr / n, TINY)
        ll = -0.5 * (n * (LOG_2PI + math.log(sigma2) + 1.0) + sumlogF)
    else:
        ll = -0.5 * (n * (LOG_2PI + math.log(sigma2)) + sumlogF + ssr / sigma2)
    return _Profile(ll, np.asarray(beta, dtype=float), float(sigma2), n)


@dataclass(frozen=True, eq=False)
class SarimaxFit:
    order: SarimaxOrder
    ar: np.ndarray
    ma: np.ndarray
    sar: np.ndarray
    sma: np.ndarray
    beta: np.ndarray  # one entry per exogenous column; 0 for dropped columns
    exog_used: np.ndarray  # bool mask of columns that survived differencing
    sigma2: float
    loglik: float
    aic: float
    n_obs: int
    exog_names: tuple = ()
    converged: bool = True
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_params(self) -> int:
        return self.order.n_arma + int(self.exog_used.sum()) + 1

    def to_dict(self) -> dict:
        return {
            "order": list(self.order.as_tuple()),
            "ar": self.ar.tolist(), "ma": self.ma.tolist(),
            "sar": self.sar.tolist(), "sma": self.sma.tolist(),
            "beta": self.beta.tolist(), "exog_used": self.exog_used.tolist(),
            "exog_names": list(self.exog_names),
            "sigma2": self.sigma2, "loglik": self.loglik, "aic": self.aic,
            "n_obs": self.n_obs, "converged": self.converged,
        }

    @classmethod
    def from_dict(cls, d) -> "SarimaxFit":
        arr = lambda k: np.asarray(d[k], dtype=float)  # noqa: E731
        return cls(SarimaxOrder(*d["order"]), arr("ar"), arr("ma"), arr("sar"), arr("sma"),
                   arr("beta"), np.asarray(d["exog_used"], dtype=bool), float(d["sigma2"]),
                   float(d["loglik"]), float(d["aic"]), int(d["n_obs"]),
                   tuple(d.get("exog_names", ())), bool(d.get("converged", True)))


def _prepare(y, X, order: SarimaxOrder):
    y = np.asarray(y, dtype=float)
    if X is None:
        X = np.zeros((y.size, 0))
    X = np.asarray(X, dtype=float).reshape(y.size, -1)
    order.check_length(y.size)
    w = difference(y, order.d, order.D, order.s)
    Xd = difference(X, order.d, order.D, order.s) if X.shape[1] else np.zeros((w.size, 0))
    used = np.array([np.max(np.abs(Xd[:, j])) > 1e-10 for j in range(Xd.shape[1])], dtype=bool)
    W = np.column_stack([w, Xd[:, used]]) if used.any() else w[:, None]
    return W, used


def loglike(y, X, order: SarimaxOrder, ar=(), ma=(), sar=(), sma=(),
            beta=None, sigma2=None) -> float:
    """Exact Gaussian log-likelihood of the differenced model.

    ``beta`` and ``sigma2`` are profiled out when not given.
    """
    W, used = _prepare(y, X, order)
    if beta is not None:
        beta = np.asarray(beta, dtype=float)[used]
    return _profile_loglik(order, np.asarray(ar, float), np.asarray(ma, float),
                           np.asarray(sar, float), np.asarray(sma, float), W,
                           sigma2, beta).loglik


def fit(y, X, order: SarimaxOrder, n_restarts: int = 5, seed: int = 0,
        exog_names=(), gtol: float = 1e-8) -> SarimaxFit:
    """Maximum-likelihood fit with random restarts.

    The first start is the zero-coefficient model; further starts draw
    unconstrained parameters from N(0, 0.5^2).
    """
    W, used = _prepare(y, X, order)
    n = W.shape[0]
    n_x = order.n_arma

    def negll(x):
        ar, ma, sar, sma = _split_params(order, x)
        ll = _profile_loglik(order, ar, ma, sar, sma, W).loglik
        return -ll / n if np.isfinite(ll) else 1e10

    rng = np.random.default_rng(seed)
    attempts = []
    if n_x == 0:
        attempts.append((np.zeros(0), True, "no ARMA coefficients"))
    else:
        starts = [np.zeros(n_x)] + [rng.normal(0.0, 0.5, n_x) for _ in range(max(n_restarts, 1) - 1)]
        for x0 in starts:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                res = minimize(negll, x0, method="L-BFGS-B",
                               options={"gtol": gtol, "maxiter": 500})
            ok = bool(res.success) or (np.isfinite(res.fun) and res.fun < 1e9 and
                                       np.max(np.abs(res.jac)) < 1e-4)
            attempts.append((res.x, ok, str(res.message)))
    scored = []
    for x, ok, msg in attempts:
        ar, ma, sar, sma = _split_params(order, x)
        prof = _profile_loglik(order, ar, ma, sar, sma, W)
        scored.append((prof.loglik, ok, x, msg, prof))
    good = [s for s in scored if s[1] and np.isfinite(s[0])]
    if not good:
        best = max(scored, key=lambda s: s[0] if np.isfinite(s[0]) else -np.inf)
        raise SarimaxError(f"no restart converged for order {order}",
                           {"best_loglik": best[0], "message": best[3], "x": best[2].tolist()})
    ll, _, x, _, prof = max(good, key=lambda s: s[0])
    ar, ma, sar, sma = _project(order, *_split_params(order, x))
    beta = np.zeros(used.size)
    beta[used] = prof.beta
    k = n_x + int(used.sum()) + 1
    return SarimaxFit(order, ar, ma, sar, sma, beta, used, prof.sigma2, ll, 2 * k - 2 * ll, n,
                      tuple(exog_names), True,
                      {"restarts": len(attempts), "converged_restarts": len(good)})


def _project(order, ar, ma, sar, sma, margin=1e-6):
    out = []
    for name, c in (("ar", ar), ("ma", ma), ("sar", sar), ("sma", sma)):
        c = np.asarray(c, dtype=float)
        if c.size:
            smallest = np.min(np.abs(np.roots(lag_poly(c)[::-1])))
            if smallest <= 1.0 + margin:
                logger.warning("order %s: %s polynomial at the unit circle; shrinking", order, name)
                rho = (1.0 + 2 * margin) / smallest
                c = c * rho ** -np.arange(1, c.size + 1)
        out.append(c)
    return out


def default_search_space(s: int = 7):
    return [SarimaxOrder(p, d, q, P, D, Q, s)
            for p, d, q, P, D, Q in itertools.product(range(3), range(2), range(3),
                                                      range(3), range(2), range(3))]


def select_order(y, X, search_space=None, n_restarts: int = 1, seed: int = 0,
                 return_table: bool = False):
    """Return the order minimizing AIC over ``search_space``.

    Ties go to fewer parameters, then to the lexicographically smallest
    order. Orders that fail to converge or are too long for the data are
    skipped.
    """
    space = list(search_space) if search_space is not None else default_search_space()
    if not space:
        raise ValueError("empty search space")
    table = []
    for order in space:
        try:
            f = fit(y, X, order, n_restarts=n_restarts, seed=seed)
        except (SarimaxError, ValueError, np.linalg.LinAlgError) as exc:
            logger.debug("order %s failed: %s", order, exc)
            continue
        table.append((f.aic, f.n_params, order.as_tuple(), order, f))
    if not table:
        raise SarimaxError("all candidate orders failed")
    table.sort(key=lambda row: row[:3])
    best = table[0][3]
    if return_table:
        return best, [(row[3], row[4].aic, row[4].loglik) for row in table]
    return best


# --- forecasting --------------------------------------------------------------

def _residual_states(fit_: SarimaxFit, y, X):
    """Differenced regression residuals and predicted ARMA states."""
    order = fit_.order
    y = np.asarray(y, dtype=float)
    X = np.zeros((y.size, 0)) if X is None else np.asarray(X, dtype=float).reshape(y.size, -1)
    w = difference(y, order.d, order.D, order.s)
    if X.shape[1]:
        if X.shape[1] != fit_.beta.size:
            raise ValueError(f"expected {fit_.beta.size} exogenous columns, got {X.shape[1]}")
        w = w - difference(X, order.d, order.D, order.s) @ fit_.beta
    elif fit_.beta.size:
        raise ValueError("missing exogenous regressors")
    phi, R = _state_polys(order, fit_.ar, fit_.ma, fit_.sar, fit_.sma)
    _, _, states = _arma_filter(phi, R, np.ascontiguousarray(w[:, None]), True)
    return phi, states


def _arma_paths(phi, state, horizon):
    """Noise forecasts ``Z T^(h-1) a`` for h = 1..horizon."""
    out = np.empty(horizon)
    a = state.copy()
    for h in range(horizon):
        out[h] = a[0]
        a = phi * a[0] + np.append(a[1:], 0.0)
    return out


def forecast_from_states(fit_: SarimaxFit, y, X, origins, horizon: int = 7) -> np.ndarray:
    """h-step conditional means from each origin index (0-based into ``y``).

    ``X`` must cover ``len(y)`` rows plus any rows needed beyond the last
    origin (``max(origins) + horizon`` rows in total); ``y`` is only read
    up to each origin.
    """
    order = fit_.order
    y = np.asarray(y, dtype=float)
    origins = np.asarray(origins, dtype=int)
    n_need = int(origins.max()) + horizon + 1
    X = None if X is None else np.asarray(X, dtype=float).reshape(-1, fit_.beta.size)
    if X is not None and X.shape[0] < n_need:
        raise ValueError("missing future exogenous values")
    if int(origins.min()) < order.n_diff:
        raise ValueError("origin too early to undo differencing")
    last = int(origins.max())
    hist_X = None if X is None else X[: last + 1]
    phi, states = _residual_states(fit_, y[: last + 1], hist_X)
    c = integration_coeffs(order.d, order.D, order.s)
    xd_all = None
    if X is not None and fit_.beta.size:
        xd_all = difference(X[:n_need], order.d, order.D, order.s) @ fit_.beta
    out = np.empty((origins.size, horizon))
    for row, t in enumerate(origins):
        # predicted state before differenced obs index t+1-n_diff
        k = t + 1 - order.n_diff
        noise = _arma_paths(phi, states[k], horizon)
        path = list(y[: t + 1][-c.size:]) if c.size else []
        for h in range(horizon):
            wd = noise[h]
            if xd_all is not None:
                wd += xd_all[k + h]
            val = wd + sum(c[j] * path[-1 - j] for j in range(c.size))
            out[row, h] = val
            if c.size:
                path.append(val)
    return out


def forecast(fit_: SarimaxFit, y_history, X_history=None, X_future=None, horizon: int = 7) -> np.ndarray:
    """Forecast ``horizon`` days beyond the end of ``y_history``."""
    y_history = np.asarray(y_history, dtype=float)
    X = None
    if fit_.beta.size:
        if X_future is None or X_history is None:
            raise ValueError("missing future exogenous values")
        X_future = np.asarray(X_future, dtype=float).reshape(-1, fit_.beta.size)
        if X_future.shape[0] < horizon:
            raise ValueError("missing future exogenous values")
        X = np.vstack([np.asarray(X_history, dtype=float).reshape(-1, fit_.beta.size),
                       X_future[:horizon]])
    return forecast_from_states(fit_, y_history, X, [y_history.size - 1], horizon)[0]


def rolling_one_step(fit_: SarimaxFit, y, X, origins, horizon: int = 7) -> np.ndarray:
    """Targets t+h filled with the one-step forecast issued at t+h-1."""
    origins = np.asarray(origins, dtype=int)
    issue = np.unique((origins[:, None] + np.arange(horizon)[None, :]).ravel())
    one = forecast_from_states(fit_, y, X, issue, 1)[:, 0]
    lookup = dict(zip(issue.tolist(), one))
    return np.array([[lookup[t + h] for h in range(horizon)] for t in origins])


def simulate(order: SarimaxOrder, n: int, ar=(), ma=(), sar=(), sma=(), sigma2: float = 1.0,
             seed: int = 0, burn: int = 500) -> np.ndarray:
    """Simulate an integrated seasonal ARMA path of length ``n``."""
    rng = np.random.default_rng(seed)
    e = rng.normal(0.0, math.sqrt(sigma2), n + burn)
    ar_full = np.convolve(lag_poly(ar), lag_poly(sar, order.s))
    ma_full = np.convolve(lag_poly(ma), lag_poly(sma, order.s))
    u = lfilter(ma_full, ar_full, e)[burn:]
    diff_poly = np.concatenate([[1.0], -integration_coeffs(order.d, order.D, order.s)])
    return lfilter([1.0], diff_poly, u)
