"""Gradient-boosted regression trees, one ensemble per forecast horizon.

Squared-error loss (gradient ``pred - y``, hessian 1) with an l2 penalty
``lambda`` on leaf weights and a per-split penalty ``gamma``. Trees are
grown level by level with exact greedy split search over every midpoint
between consecutive distinct feature values. Ties go to the lowest feature
index, then the lowest threshold.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from numba import njit

from .features import HORIZON, WindowSample, WindowSet


class GbtError(ValueError):
    pass


@dataclass(frozen=True)
class GbtConfig:
    n_trees: int = 100
    learning_rate: float = 0.05
    max_depth: int = 3
    reg_lambda: float = 1.0
    gamma: float = 0.0
    min_child_weight: float = 1.0
    seed: int = 0  # training is deterministic; kept for the run manifest

    def __post_init__(self):
        if self.n_trees < 1:
            raise GbtError("n_trees must be >= 1")
        if not 0.0 < self.learning_rate <= 1.0:
            raise GbtError("learning_rate must lie in (0, 1]")
        if self.max_depth < 0:
            raise GbtError("max_depth must be >= 0")
        if self.reg_lambda < 0 or self.gamma < 0 or self.min_child_weight < 0:
            raise GbtError("reg_lambda, gamma and min_child_weight must be >= 0")


@dataclass(frozen=True, eq=False)
class Tree:
    """Flat preorder node arrays; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray  # leaf weight (0 at internal nodes)
    gain: np.ndarray  # split gain (0 at leaves)
    cover: np.ndarray  # hessian sum of training samples reaching the node

    @property
    def n_nodes(self) -> int:
        return int(self.feature.size)

    @property
    def depth(self) -> int:
        def rec(i):
            if self.feature[i] < 0:
                return 0
            return 1 + max(rec(self.left[i]), rec(self.right[i]))
        return rec(0)

    def predict(self, X) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=float)
        return _predict_tree(X, self.feature, self.threshold, self.left, self.right, self.value)

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in
                ("feature", "threshold", "left", "right", "value", "gain", "cover")}

    @classmethod
    def from_dict(cls, d) -> "Tree":
        ints = ("feature", "left", "right")
        return cls(**{k: np.asarray(v, dtype=np.int64 if k in ints else float) for k, v in d.items()})

    @classmethod
    def leaf(cls, value: float, cover: float = 0.0) -> "Tree":
        return cls(np.array([-1]), np.array([0.0]), np.array([-1]), np.array([-1]),
                   np.array([float(value)]), np.array([0.0]), np.array([float(cover)]))


@njit(cache=True)
def _predict_tree(X, feature, threshold, left, right, value):
    n = X.shape[0]
    out = np.empty(n)
    for i in range(n):
        node = 0
        while feature[node] >= 0:
            if X[i, feature[node]] < threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = value[node]
    return out


@njit(cache=True)
def _best_split(idx, vals, g, h, s, e, G, H, lam, gamma, mcw):
    """Best (feature, threshold, gain) over the sorted segment [s, e) of every feature."""
    node_of = np.full(g.size, -1, dtype=np.int64)
    for pos in range(s, e):
        node_of[idx[0, pos]] = 0
    Gn = np.array([G])
    Hn = np.array([H])
    feats, thrs, gains = _level_search(idx, vals, g, h, node_of, Gn, Hn, lam, gamma, mcw)
    return feats[0], thrs[0], gains[0]


@njit(cache=True)
def _level_search(idx, vals, g, h, node_of, Gn, Hn, lam, gamma, mcw):
    """Exact greedy search for all open nodes of one level in a single sweep.

    ``node_of[i]`` is the open-node slot of sample ``i`` (-1 if settled).
    Each presorted feature column is scanned once; candidate thresholds
    are midpoints between consecutive distinct values within a node.
    """
    p, n = idx.shape
    m = Gn.size
    best_f = -np.ones(m, dtype=np.int64)
    best_thr = np.zeros(m)
    best_gain = np.zeros(m)
    parent = np.empty(m)
    for k in range(m):
        parent[k] = Gn[k] * Gn[k] / (Hn[k] + lam)
    GL = np.zeros(m)
    HL = np.zeros(m)
    last = np.zeros(m)
    seen = np.zeros(m, dtype=np.bool_)
    for f in range(p):
        for k in range(m):
            GL[k] = 0.0
            HL[k] = 0.0
            seen[k] = False
        for pos in range(n):
            i = idx[f, pos]
            k = node_of[i]
            if k < 0:
                continue
            x = vals[f, pos]
            if seen[k] and x != last[k]:
                hl = HL[k]
                hr = Hn[k] - hl
                if hl >= mcw and hr >= mcw:
                    gl = GL[k]
                    gr = Gn[k] - gl
                    gain = 0.5 * (gl * gl / (hl + lam) + gr * gr / (hr + lam) - parent[k]) - gamma
                    if gain > best_gain[k]:
                        best_gain[k] = gain
                        best_f[k] = f
                        best_thr[k] = 0.5 * (last[k] + x)
            GL[k] += g[i]
            HL[k] += h[i]
            last[k] = x
            seen[k] = True
    return best_f, best_thr, best_gain


@njit(cache=True)
def _grow(X, idx, vals, g, h, max_depth, lam, gamma, mcw):
    """Grow one tree breadth-first; returns BFS-ordered node arrays and leaf ids."""
    n = X.shape[0]
    cap = 2 ** (max_depth + 1)
    feature = -np.ones(cap, dtype=np.int64)
    threshold = np.zeros(cap)
    left = -np.ones(cap, dtype=np.int64)
    right = -np.ones(cap, dtype=np.int64)
    value = np.zeros(cap)
    gain = np.zeros(cap)
    cover = np.zeros(cap)
    gsum = np.zeros(cap)
    leaf_of = np.zeros(n, dtype=np.int64)
    node_of = np.zeros(n, dtype=np.int64)
    for i in range(n):
        gsum[0] += g[i]
        cover[0] += h[i]
    n_nodes = 1
    level = np.zeros(1, dtype=np.int64)
    for depth in range(max_depth + 1):
        m = level.size
        Gn = np.empty(m)
        Hn = np.empty(m)
        for k in range(m):
            Gn[k] = gsum[level[k]]
            Hn[k] = cover[level[k]]
        if depth < max_depth:
            feats, thrs, gains = _level_search(idx, vals, g, h, node_of, Gn, Hn, lam, gamma, mcw)
        else:
            feats = -np.ones(m, dtype=np.int64)
            thrs = np.zeros(m)
            gains = np.zeros(m)
        slot = -np.ones(2 * m, dtype=np.int64)
        nxt = np.empty(2 * m, dtype=np.int64)
        n_next = 0
        for k in range(m):
            node = level[k]
            if feats[k] < 0:
                value[node] = -gsum[node] / (cover[node] + lam)
                continue
            feature[node] = feats[k]
            threshold[node] = thrs[k]
            gain[node] = gains[k]
            left[node] = n_nodes
            right[node] = n_nodes + 1
            slot[2 * k] = n_next
            slot[2 * k + 1] = n_next + 1
            nxt[n_next] = n_nodes
            nxt[n_next + 1] = n_nodes + 1
            n_nodes += 2
            n_next += 2
        # route samples; children statistics accumulate in sample order
        for i in range(n):
            k = node_of[i]
            if k < 0:
                continue
            node = level[k]
            if feature[node] < 0:
                leaf_of[i] = node
                node_of[i] = -1
                continue
            side = 0 if X[i, feature[node]] < threshold[node] else 1
            child = left[node] if side == 0 else right[node]
            gsum[child] += g[i]
            cover[child] += h[i]
            node_of[i] = slot[2 * k + side]
        level = nxt[:n_next]
        if n_next == 0:
            break
    return (feature[:n_nodes], threshold[:n_nodes], left[:n_nodes], right[:n_nodes],
            value[:n_nodes], gain[:n_nodes], cover[:n_nodes], leaf_of)


def _to_preorder(feature, threshold, left, right, value, gain, cover):
    order = []
    stack = [0]
    while stack:
        i = stack.pop()
        order.append(i)
        if feature[i] >= 0:
            stack.append(right[i])
            stack.append(left[i])
    pos = np.empty(len(order), dtype=np.int64)
    pos[order] = np.arange(len(order))
    order = np.asarray(order)
    remap = lambda c: np.where(c[order] >= 0, pos[np.maximum(c[order], 0)], -1)  # noqa: E731
    return Tree(feature[order].astype(np.int64), threshold[order].copy(), remap(left), remap(right),
                value[order].copy(), gain[order].copy(), cover[order].copy()), pos


class _Presorted:
    """Per-feature sort order of a training matrix, shared across horizons."""

    def __init__(self, X):
        X = np.ascontiguousarray(X, dtype=float)
        if not np.all(np.isfinite(X)):
            raise GbtError("missing or non-finite feature values are not supported")
        self.X = X
        self.idx = np.ascontiguousarray(np.argsort(X, axis=0, kind="stable").T.astype(np.int64))
        self.vals = np.ascontiguousarray(np.take_along_axis(X.T, self.idx, axis=1))


def grow_tree(X, g, h=None, config: GbtConfig = GbtConfig(), presorted: _Presorted | None = None):
    """Grow a single tree on gradients ``g`` and hessians ``h``.

    Returns ``(tree, leaf_index_per_sample)`` with preorder node ids.
    """
    ps = presorted or _Presorted(X)
    g = np.ascontiguousarray(g, dtype=float)
    h = np.ones_like(g) if h is None else np.ascontiguousarray(h, dtype=float)
    arrays = _grow(ps.X, ps.idx, ps.vals, g, h, config.max_depth, config.reg_lambda,
                   config.gamma, config.min_child_weight)
    tree, pos = _to_preorder(*arrays[:7])
    return tree, pos[arrays[7]]


def best_split(X, g, h=None, reg_lambda=1.0, gamma=0.0, min_child_weight=1.0):
    """Root split chosen by the greedy search: ``(feature, threshold, gain)``.

    ``feature`` is -1 when no split has positive gain.
    """
    ps = _Presorted(X)
    g = np.ascontiguousarray(g, dtype=float)
    h = np.ones_like(g) if h is None else np.ascontiguousarray(h, dtype=float)
    f, thr, gain = _best_split(ps.idx, ps.vals, g, h, 0, g.size, g.sum(), h.sum(),
                               reg_lambda, gamma, min_child_weight)
    return int(f), float(thr), float(gain)


@dataclass(frozen=True, eq=False)
class HorizonEnsemble:
    horizon: int
    base_score: float
    trees: tuple
    learning_rate: float
    reg_lambda: float
    train_loss: tuple = ()  # mean squared error after each round

    def predict(self, X) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=float)
        out = np.full(X.shape[0], self.base_score)
        for t in self.trees:
            out += self.learning_rate * t.predict(X)
        return out


def fit_ensemble(X, y, config: GbtConfig, horizon: int = 1,
                 presorted: _Presorted | None = None) -> HorizonEnsemble:
    """Boost ``config.n_trees`` trees on targets ``y``."""
    y = np.asarray(y, dtype=float)
    if y.size < 2:
        raise GbtError("need at least 2 training samples")
    ps = presorted or _Presorted(X)
    base = float(y.mean())
    pred = np.full(y.size, base)
    h = np.ones(y.size)
    trees, losses = [], []
    for _ in range(config.n_trees):
        tree, leaves = grow_tree(ps.X, pred - y, h, config, ps)
        pred = pred + config.learning_rate * tree.value[leaves]
        trees.append(tree)
        losses.append(float(np.mean((pred - y) ** 2)))
    return HorizonEnsemble(horizon, base, tuple(trees), config.learning_rate,
                           config.reg_lambda, tuple(losses))


def feature_manifest(names, input_days: int) -> tuple:
    return tuple(f"d{-(input_days - 1 - day)}_{name}" if day < input_days - 1 else f"d0_{name}"
                 for day in range(input_days) for name in names)


def flatten(sample) -> np.ndarray:
    """Row-major flattening (day, then feature) of one window's inputs."""
    X = sample.X if isinstance(sample, WindowSample) else np.asarray(sample)
    return np.asarray(X, dtype=float).reshape(-1)


def flatten_set(windows: WindowSet) -> np.ndarray:
    return windows.X.reshape(len(windows), -1)


@dataclass(frozen=True, eq=False)
class MultistepGbt:
    config: GbtConfig
    ensembles: tuple
    feature_names: tuple

    def predict(self, sample) -> np.ndarray:
        x = flatten(sample)
        return self.predict_matrix(x[None, :])[0]

    def predict_matrix(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != len(self.feature_names):
            raise GbtError(f"expected {len(self.feature_names)} features, got shape {X.shape}")
        return np.column_stack([e.predict(X) for e in self.ensembles])

    def predict_windows(self, windows: WindowSet) -> np.ndarray:
        return self.predict_matrix(flatten_set(windows))

    def to_dict(self) -> dict:
        return {
            "kind": "gbt",
            "config": asdict(self.config),
            "feature_names": list(self.feature_names),
            "ensembles": [{"horizon": e.horizon, "base_score": e.base_score,
                           "learning_rate": e.learning_rate, "reg_lambda": e.reg_lambda,
                           "trees": [t.to_dict() for t in e.trees]} for e in self.ensembles],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d) -> "MultistepGbt":
        ens = tuple(HorizonEnsemble(e["horizon"], float(e["base_score"]),
                                    tuple(Tree.from_dict(t) for t in e["trees"]),
                                    float(e["learning_rate"]), float(e["reg_lambda"]))
                    for e in d["ensembles"])
        return cls(GbtConfig(**d["config"]), ens, tuple(d["feature_names"]))


def fit_multistep(train: WindowSet, config: GbtConfig) -> MultistepGbt:
    """Fit seven independent ensembles, horizon h on targets ``y[h-1]``."""
    X = flatten_set(train)
    ps = _Presorted(X)
    ensembles = tuple(fit_ensemble(X, train.Y[:, h], config, h + 1, ps)
                      for h in range(train.Y.shape[1]))
    names = feature_manifest(train.names, train.X.shape[1])
    return MultistepGbt(config, ensembles, names)


def predict(model: MultistepGbt, sample) -> np.ndarray:
    return model.predict(sample)


def base_only(train: WindowSet, names=None) -> MultistepGbt:
    """Model made of base scores only (no trees)."""
    cfg = GbtConfig(n_trees=1)
    ens = tuple(HorizonEnsemble(h + 1, float(train.Y[:, h].mean()), (), cfg.learning_rate,
                                cfg.reg_lambda) for h in range(HORIZON))
    return MultistepGbt(cfg, ens, names or feature_manifest(train.names, train.X.shape[1]))
