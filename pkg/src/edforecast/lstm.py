"""Stacked LSTM regressor emitting the 7-day forecast in one forward pass.

Pure numpy in double precision with hand-written backpropagation through
time. Gate blocks are stored in the order input, forget, candidate, output.
The top layer's final hidden state goes through inverted dropout, a ReLU
dense layer and a linear projection to the horizon.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from .features import HORIZON, StandardizationParams, WindowSample, WindowSet

logger = logging.getLogger(__name__)


class LstmError(ValueError):
    pass


@dataclass(frozen=True)
class LstmConfig:
    hidden_size: int = 32
    n_layers: int = 2
    dropout_p: float = 0.2
    dense_units: int = 128
    learning_rate: float = 0.01
    batch_size: int = 64
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0
    forget_bias: float = 1.0
    clip_norm: float = 5.0
    val_fraction: float = 0.2

    def __post_init__(self):
        for name in ("hidden_size", "n_layers", "dense_units", "batch_size", "max_epochs"):
            if getattr(self, name) < 1:
                raise LstmError(f"{name} must be positive")
        if self.learning_rate <= 0:
            raise LstmError("learning_rate must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise LstmError("dropout_p must lie in [0, 1)")
        if self.patience < 0:
            raise LstmError("patience must be >= 0")
        if not 0.0 < self.val_fraction < 1.0:
            raise LstmError("val_fraction must lie in (0, 1)")


@dataclass(eq=False)
class LstmParams:
    """Parameter blocks; ``Wx[l]`` is (in, 4H), ``Wh[l]`` is (H, 4H)."""

    Wx: list
    Wh: list
    b: list
    Wd: np.ndarray
    bd: np.ndarray
    Wo: np.ndarray
    bo: np.ndarray

    def blocks(self) -> dict:
        out = {}
        for l in range(len(self.Wx)):
            out[f"layer{l}.Wx"] = self.Wx[l]
            out[f"layer{l}.Wh"] = self.Wh[l]
            out[f"layer{l}.b"] = self.b[l]
        out.update({"dense.W": self.Wd, "dense.b": self.bd, "proj.W": self.Wo, "proj.b": self.bo})
        return out

    @classmethod
    def from_blocks(cls, blocks: dict) -> "LstmParams":
        n = sum(1 for k in blocks if k.endswith(".Wx"))
        return cls([blocks[f"layer{l}.Wx"] for l in range(n)],
                   [blocks[f"layer{l}.Wh"] for l in range(n)],
                   [blocks[f"layer{l}.b"] for l in range(n)],
                   blocks["dense.W"], blocks["dense.b"], blocks["proj.W"], blocks["proj.b"])

    def copy(self) -> "LstmParams":
        return LstmParams.from_blocks({k: v.copy() for k, v in self.blocks().items()})

    def zeros_like(self) -> "LstmParams":
        return LstmParams.from_blocks({k: np.zeros_like(v) for k, v in self.blocks().items()})

    @property
    def n_inputs(self) -> int:
        return self.Wx[0].shape[0]

    @property
    def hidden_size(self) -> int:
        return self.Wh[0].shape[0]

    def to_dict(self) -> dict:
        return {k: v.tolist() for k, v in self.blocks().items()}

    @classmethod
    def from_dict(cls, d) -> "LstmParams":
        return cls.from_blocks({k: np.asarray(v, dtype=float) for k, v in d.items()})


def init_params(n_inputs: int, config: LstmConfig, rng: np.random.Generator,
                n_outputs: int = HORIZON) -> LstmParams:
    """Uniform(-1/sqrt(H), 1/sqrt(H)) weights, zero biases, forget bias set."""
    H = config.hidden_size
    bound = 1.0 / np.sqrt(H)
    Wx, Wh, b = [], [], []
    for l in range(config.n_layers):
        n_in = n_inputs if l == 0 else H
        Wx.append(rng.uniform(-bound, bound, (n_in, 4 * H)))
        Wh.append(rng.uniform(-bound, bound, (H, 4 * H)))
        bias = np.zeros(4 * H)
        bias[H:2 * H] = config.forget_bias
        b.append(bias)
    Wd = rng.uniform(-bound, bound, (H, config.dense_units))
    db = 1.0 / np.sqrt(config.dense_units)
    Wo = rng.uniform(-db, db, (config.dense_units, n_outputs))
    return LstmParams(Wx, Wh, b, Wd, np.zeros(config.dense_units), Wo, np.zeros(n_outputs))


@dataclass(eq=False)
class _Cache:
    inputs: list  # per layer input sequence (B, L, in)
    gates: list  # per layer (B, L, 4H) post-activation
    cells: list  # per layer (B, L+1, H) with c_0 at index 0
    hiddens: list  # per layer (B, L+1, H) with h_0 at index 0
    mask: np.ndarray  # (B, H) scaled dropout mask
    dense_pre: np.ndarray
    dense_out: np.ndarray
    params: LstmParams = field(repr=False)


def forward_batch(params: LstmParams, X: np.ndarray, train_mode: bool = False,
                  dropout_p: float = 0.0, rng: np.random.Generator | None = None):
    """Forward pass on a batch ``X`` of shape (B, L, F); returns ``(Y, cache)``."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 3 or X.shape[2] != params.n_inputs:
        raise LstmError(f"expected input (B, L, {params.n_inputs}), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise LstmError("non-finite input")
    B, L, _ = X.shape
    H = params.hidden_size
    seq = X
    inputs, gates, cells, hiddens = [], [], [], []
    for Wx, Wh, b in zip(params.Wx, params.Wh, params.b):
        zin = (seq.reshape(B * L, -1) @ Wx).reshape(B, L, 4 * H) + b
        g_all = np.empty((B, L, 4 * H))
        c = np.zeros((B, L + 1, H))
        h = np.zeros((B, L + 1, H))
        for t in range(L):
            z = zin[:, t] + h[:, t] @ Wh
            gt = g_all[:, t]
            gt[:, :H] = expit(z[:, :H])
            gt[:, H:2 * H] = expit(z[:, H:2 * H])
            gt[:, 2 * H:3 * H] = np.tanh(z[:, 2 * H:3 * H])
            gt[:, 3 * H:] = expit(z[:, 3 * H:])
            c[:, t + 1] = gt[:, H:2 * H] * c[:, t] + gt[:, :H] * gt[:, 2 * H:3 * H]
            h[:, t + 1] = gt[:, 3 * H:] * np.tanh(c[:, t + 1])
        inputs.append(seq)
        gates.append(g_all)
        cells.append(c)
        hiddens.append(h)
        seq = h[:, 1:]
    top = hiddens[-1][:, L]
    if train_mode and dropout_p > 0:
        if rng is None:
            raise LstmError("train-mode dropout needs a random generator")
        mask = (rng.random(top.shape) >= dropout_p) / (1.0 - dropout_p)
    else:
        mask = np.ones_like(top)
    u = (top * mask) @ params.Wd + params.bd
    r = np.maximum(u, 0.0)
    Y = r @ params.Wo + params.bo
    return Y, _Cache(inputs, gates, cells, hiddens, mask, u, r, params)


def forward(params: LstmParams, config: LstmConfig, X: np.ndarray, train_mode: bool = False,
            seed: int | None = None):
    """Single-sample forward on an (L, F) matrix; returns ``(y, cache)``."""
    rng = np.random.default_rng(seed) if train_mode else None
    Y, cache = forward_batch(params, np.asarray(X, dtype=float)[None], train_mode,
                             config.dropout_p, rng)
    return Y[0], cache


def backward(cache: _Cache, grad_out: np.ndarray) -> LstmParams:
    """Gradients of ``sum(grad_out * Y)`` with respect to every parameter."""
    p = cache.params
    dY = np.asarray(grad_out, dtype=float)
    if dY.ndim == 1:
        dY = dY[None]
    grads = p.zeros_like()
    grads.Wo = cache.dense_out.T @ dY
    grads.bo = dY.sum(axis=0)
    dr = dY @ p.Wo.T
    du = dr * (cache.dense_pre > 0)
    top = cache.hiddens[-1][:, -1]
    grads.Wd = (top * cache.mask).T @ du
    grads.bd = du.sum(axis=0)
    dtop = (du @ p.Wd.T) * cache.mask
    B, L1, H = cache.hiddens[-1].shape
    L = L1 - 1
    dseq = np.zeros((B, L, H))
    dseq[:, -1] = dtop
    for l in reversed(range(len(p.Wx))):
        g_all, c, h, seq = cache.gates[l], cache.cells[l], cache.hiddens[l], cache.inputs[l]
        Wh = p.Wh[l]
        dz = np.empty((B, L, 4 * H))
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        for t in reversed(range(L)):
            gi = g_all[:, t, :H]
            gf = g_all[:, t, H:2 * H]
            gg = g_all[:, t, 2 * H:3 * H]
            go = g_all[:, t, 3 * H:]
            dh = dseq[:, t] + dh_next
            tc = np.tanh(c[:, t + 1])
            dc = dc_next + dh * go * (1.0 - tc * tc)
            dzt = dz[:, t]
            dzt[:, :H] = dc * gg * gi * (1.0 - gi)
            dzt[:, H:2 * H] = dc * c[:, t] * gf * (1.0 - gf)
            dzt[:, 2 * H:3 * H] = dc * gi * (1.0 - gg * gg)
            dzt[:, 3 * H:] = dh * tc * go * (1.0 - go)
            dc_next = dc * gf
            dh_next = dzt @ Wh.T
        grads.Wh[l] = h[:, :L].reshape(B * L, H).T @ dz.reshape(B * L, 4 * H)
        grads.Wx[l] = seq.reshape(B * L, -1).T @ dz.reshape(B * L, 4 * H)
        grads.b[l] = dz.sum(axis=(0, 1))
        if l > 0:
            dseq = (dz.reshape(B * L, 4 * H) @ p.Wx[l].T).reshape(B, L, H)
    return grads


def mse_and_grad(Y: np.ndarray, T: np.ndarray):
    diff = Y - T
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


class Adam:
    def __init__(self, params: LstmParams, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.blocks().items()}
        self.v = {k: np.zeros_like(v) for k, v in params.blocks().items()}
        self.t = 0

    def step(self, params: LstmParams, grads: LstmParams) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        gb = grads.blocks()
        for k, w in params.blocks().items():
            g = gb[k]
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            w -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_gradients(grads: LstmParams, max_norm: float) -> float:
    """Scale gradients in place to global norm ``max_norm``; returns the norm."""
    blocks = grads.blocks()
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in blocks.values())))
    if norm > max_norm:
        for g in blocks.values():
            g *= max_norm / norm
    return norm


@dataclass(frozen=True)
class TrainReport:
    epochs_run: int
    train_loss: tuple
    val_loss: tuple
    best_epoch: int  # 1-based
    early_stopped: bool

    @property
    def best_val_loss(self) -> float:
        return self.val_loss[self.best_epoch - 1]

    def to_dict(self) -> dict:
        return asdict(self) | {"train_loss": list(self.train_loss), "val_loss": list(self.val_loss)}


def _predict_std(params, X, batch=512):
    return np.concatenate([forward_batch(params, X[i:i + batch])[0]
                           for i in range(0, X.shape[0], batch)], axis=0)


def train(train_windows: WindowSet, config: LstmConfig = LstmConfig()):
    """Fit on the earlier 80% of windows, early-stop on the chronologically last 20%.

    Returns ``(params, report, standardization)``.
    """
    n = len(train_windows)
    if n < 10:
        raise LstmError(f"need at least 10 training windows, got {n}")
    std = StandardizationParams.fit(train_windows)
    X = std.transform_X(train_windows.X)
    Y = std.transform_y(train_windows.Y)
    n_val = max(1, int(round(config.val_fraction * n)))
    n_fit = n - n_val
    Xf, Yf, Xv, Yv = X[:n_fit], Y[:n_fit], X[n_fit:], Y[n_fit:]
    init_ss, shuffle_ss, drop_ss = np.random.SeedSequence(config.seed).spawn(3)
    params = init_params(X.shape[2], config, np.random.default_rng(init_ss), Y.shape[1])
    shuffle_rng = np.random.default_rng(shuffle_ss)
    drop_rng = np.random.default_rng(drop_ss)
    opt = Adam(params, config.learning_rate)
    best, best_epoch, bad = np.inf, 0, 0
    best_params = params.copy()
    train_curve, val_curve = [], []
    early = False
    for epoch in range(1, config.max_epochs + 1):
        order = shuffle_rng.permutation(n_fit)
        total = 0.0
        for s in range(0, n_fit, config.batch_size):
            idx = order[s:s + config.batch_size]
            out, cache = forward_batch(params, Xf[idx], True, config.dropout_p, drop_rng)
            loss, dY = mse_and_grad(out, Yf[idx])
            if not np.isfinite(loss):
                raise LstmError(f"training diverged at epoch {epoch}: non-finite loss")
            grads = backward(cache, dY)
            clip_gradients(grads, config.clip_norm)
            opt.step(params, grads)
            total += loss * idx.size
        val = mse_and_grad(_predict_std(params, Xv), Yv)[0]
        if not np.isfinite(val):
            raise LstmError(f"training diverged at epoch {epoch}: non-finite validation loss")
        train_curve.append(total / n_fit)
        val_curve.append(val)
        if val < best:
            best, best_epoch, bad = val, epoch, 0
            best_params = params.copy()
        else:
            bad += 1
            if bad >= config.patience:
                early = True
                break
    report = TrainReport(len(val_curve), tuple(train_curve), tuple(val_curve), best_epoch, early)
    return best_params, report, std


@dataclass(eq=False)
class LstmModel:
    """Trained network plus the standardization and feature manifest it expects."""

    params: LstmParams
    config: LstmConfig
    standardization: StandardizationParams
    feature_names: tuple
    report: TrainReport | None = None

    def _check(self, X):
        if X.shape[-1] != len(self.feature_names) or X.shape[-1] != self.params.n_inputs:
            raise LstmError(f"feature manifest mismatch: model expects {len(self.feature_names)} "
                            f"features, got {X.shape[-1]}")

    def predict(self, sample) -> np.ndarray:
        X = sample.X if isinstance(sample, WindowSample) else np.asarray(sample, dtype=float)
        return self.predict_batch(X[None])[0]

    def predict_batch(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        self._check(X)
        Z = _predict_std(self.params, self.standardization.transform_X(X))
        return self.standardization.inverse_y(Z)

    def predict_windows(self, windows: WindowSet) -> np.ndarray:
        if windows.names != tuple(self.feature_names):
            raise LstmError("feature manifest mismatch")
        return self.predict_batch(windows.X)

    def to_dict(self) -> dict:
        return {"kind": "lstm", "config": asdict(self.config),
                "standardization": self.standardization.to_dict(),
                "feature_names": list(self.feature_names),
                "params": self.params.to_dict(),
                "report": None if self.report is None else self.report.to_dict()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d) -> "LstmModel":
        rep = d.get("report")
        if rep is not None:
            rep = TrainReport(rep["epochs_run"], tuple(rep["train_loss"]), tuple(rep["val_loss"]),
                              rep["best_epoch"], rep["early_stopped"])
        return cls(LstmParams.from_dict(d["params"]), LstmConfig(**d["config"]),
                   StandardizationParams.from_dict(d["standardization"]),
                   tuple(d["feature_names"]), rep)


def fit(train_windows: WindowSet, config: LstmConfig = LstmConfig()) -> LstmModel:
    params, report, std = train(train_windows, config)
    return LstmModel(params, config, std, tuple(train_windows.names), report)


def predict(params: LstmParams, config: LstmConfig, standardization: StandardizationParams,
            sample) -> np.ndarray:
    """Eval-mode forecast in original units for one window."""
    X = sample.X if isinstance(sample, WindowSample) else np.asarray(sample, dtype=float)
    if X.shape[-1] != params.n_inputs:
        raise LstmError(f"feature manifest mismatch: expected {params.n_inputs}, got {X.shape[-1]}")
    y, _ = forward(params, config, standardization.transform_X(X), False)
    return standardization.inverse_y(y)
