"""Gain importance and exact Shapley attributions for the GBT model.

Shapley values are computed per tree by enumerating every coalition of
the features that tree splits on. The value of a coalition is the
path-dependent expectation: at a split on an absent feature both branches
are followed, weighted by how many background samples reach each child.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .gbt import MultistepGbt, Tree, flatten

MAX_TREE_FEATURES = 15


class ExplainError(ValueError):
    pass


# --- gain importance ----------------------------------------------------------

@dataclass(frozen=True)
class ImportanceReport:
    pooled: tuple  # (feature, gain, share), sorted by gain descending
    per_horizon: tuple  # one such tuple per horizon

    def share(self, feature: str) -> float:
        for f, _, s in self.pooled:
            if f == feature:
                return s
        return 0.0

    def by_base_feature(self) -> tuple:
        """Pooled gain summed over input days, keyed by the feature name after ``d<k>_``."""
        totals: dict = {}
        for f, g, _ in self.pooled:
            base = f.split("_", 1)[1] if f.startswith("d") and "_" in f else f
            totals[base] = totals.get(base, 0.0) + g
        return _ranked(totals)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["feature", "gain", "share"])
            for f, g, s in self.pooled:
                w.writerow([f, repr(g), repr(s)])


def _ranked(totals: dict) -> tuple:
    total = sum(totals.values())
    rows = sorted(totals.items(), key=lambda kv: (-kv[1], kv[0]))
    return tuple((f, float(g), float(g / total) if total > 0 else 0.0) for f, g in rows)


def gain_importance(model: MultistepGbt) -> ImportanceReport:
    """Total split gain per feature, per horizon and pooled over horizons."""
    names = model.feature_names
    pooled: dict = {}
    per_h = []
    for ens in model.ensembles:
        totals: dict = {}
        for tree in ens.trees:
            for f, g in zip(tree.feature, tree.gain):
                if f >= 0:
                    totals[names[f]] = totals.get(names[f], 0.0) + float(g)
                    pooled[names[f]] = pooled.get(names[f], 0.0) + float(g)
        per_h.append(_ranked(totals))
    return ImportanceReport(_ranked(pooled), tuple(per_h))


# --- Shapley values -----------------------------------------------------------

@njit(cache=True)
def background_cover(feature, threshold, left, right, B):
    """Number of background rows reaching each node."""
    cover = np.zeros(feature.size)
    for i in range(B.shape[0]):
        node = 0
        cover[0] += 1.0
        while feature[node] >= 0:
            node = left[node] if B[i, feature[node]] < threshold[node] else right[node]
            cover[node] += 1.0
    return cover


@njit(cache=True)
def _coalition_values(feature, threshold, left, right, value, cover, x, used):
    """Path-dependent expected tree output for every coalition bitmask over ``used``."""
    k = used.size
    n_nodes = feature.size
    slot = -np.ones(n_nodes, dtype=np.int64)  # node -> bit position of its feature
    for n in range(n_nodes):
        if feature[n] >= 0:
            for b in range(k):
                if used[b] == feature[n]:
                    slot[n] = b
    out = np.zeros(2 ** k)
    stack_n = np.empty(n_nodes, dtype=np.int64)
    stack_w = np.empty(n_nodes)
    for mask in range(2 ** k):
        top = 0
        stack_n[0] = 0
        stack_w[0] = 1.0
        top = 1
        acc = 0.0
        while top > 0:
            top -= 1
            node = stack_n[top]
            w = stack_w[top]
            if feature[node] < 0:
                acc += w * value[node]
                continue
            l = left[node]
            r = right[node]
            if (mask >> slot[node]) & 1:
                stack_n[top] = l if x[feature[node]] < threshold[node] else r
                stack_w[top] = w
                top += 1
            else:
                c = cover[node]
                if c > 0:
                    wl = cover[l] / c
                    wr = cover[r] / c
                else:
                    wl = 0.5
                    wr = 0.5
                if wl > 0:
                    stack_n[top] = l
                    stack_w[top] = w * wl
                    top += 1
                if wr > 0:
                    stack_n[top] = r
                    stack_w[top] = w * wr
                    top += 1
        out[mask] = acc
    return out


def _shapley_weights(k: int) -> np.ndarray:
    return np.array([math.factorial(s) * math.factorial(k - s - 1) / math.factorial(k)
                     for s in range(k)])


_POPCOUNT_CACHE: dict = {}


def _popcounts(k: int) -> np.ndarray:
    if k not in _POPCOUNT_CACHE:
        m = np.arange(2 ** k)
        _POPCOUNT_CACHE[k] = np.array([bin(v).count("1") for v in m], dtype=int)
    return _POPCOUNT_CACHE[k]


def tree_used_features(tree: Tree) -> np.ndarray:
    return np.unique(tree.feature[tree.feature >= 0]).astype(np.int64)


def tree_shapley(tree: Tree, x: np.ndarray, cover: np.ndarray | None = None):
    """Exact Shapley values of one tree at ``x``.

    Returns ``(expected_value, used_features, phi)`` where ``phi[i]`` belongs
    to ``used_features[i]``.
    """
    used = tree_used_features(tree)
    k = used.size
    if k > MAX_TREE_FEATURES:
        raise ExplainError(f"tree splits on {k} features (> {MAX_TREE_FEATURES}); "
                           "reduce max_depth to keep coalition enumeration tractable")
    cover = tree.cover if cover is None else cover
    v = _coalition_values(tree.feature, tree.threshold, tree.left, tree.right, tree.value,
                          np.asarray(cover, dtype=float), np.asarray(x, dtype=float), used)
    if k == 0:
        return float(v[0]), used, np.zeros(0)
    weights = _shapley_weights(k)
    size = _popcounts(k)
    masks = np.arange(2 ** k)
    phi = np.empty(k)
    for b in range(k):
        without = masks[(masks >> b) & 1 == 0]
        phi[b] = np.sum(weights[size[without]] * (v[without | (1 << b)] - v[without]))
    return float(v[0]), used, phi


@dataclass(frozen=True, eq=False)
class ShapExplanation:
    feature_names: tuple
    base: float
    contributions: np.ndarray
    prediction: float
    horizon: int | None = None  # None for the 7-day mean

    @property
    def residual(self) -> float:
        return self.base + float(np.sum(self.contributions)) - self.prediction

    def top(self, k: int):
        order = sorted(range(len(self.contributions)),
                       key=lambda i: (-abs(self.contributions[i]), i))
        return order[:k]


@dataclass(frozen=True, eq=False)
class ShapResult:
    per_horizon: tuple
    mean: ShapExplanation


def _background_matrix(background) -> np.ndarray:
    if hasattr(background, "X") and getattr(background, "X").ndim == 3:
        return background.X.reshape(len(background), -1)
    B = np.asarray(background, dtype=float)
    if B.ndim < 2 or B.shape[0] == 0:
        raise ExplainError("empty background set")
    return B.reshape(B.shape[0], -1)


def tree_shap(model: MultistepGbt, sample, background=None) -> ShapResult:
    """Per-horizon attributions and their mean over the horizons.

    Node covers are recounted on ``background`` (typically the training
    windows); without a background the training covers stored in the
    trees are used.
    """
    x = np.ascontiguousarray(flatten(sample), dtype=float)
    names = model.feature_names
    if x.size != len(names):
        raise ExplainError(f"expected {len(names)} features, got {x.size}")
    B = None
    if background is not None:
        B = np.ascontiguousarray(_background_matrix(background), dtype=float)
        if B.shape[1] != x.size:
            raise ExplainError(f"background has {B.shape[1]} features, expected {x.size}")
    per_h = []
    for ens in model.ensembles:
        phi = np.zeros(x.size)
        base = ens.base_score
        for tree in ens.trees:
            cover = tree.cover if B is None else background_cover(tree.feature, tree.threshold,
                                                                  tree.left, tree.right, B)
            ev, used, p = tree_shapley(tree, x, cover)
            base += ens.learning_rate * ev
            phi[used] += ens.learning_rate * p
        per_h.append(ShapExplanation(names, float(base), phi, float(ens.predict(x[None])[0]), ens.horizon))
    mean = ShapExplanation(names, float(np.mean([e.base for e in per_h])),
                           np.mean([e.contributions for e in per_h], axis=0),
                           float(np.mean([e.prediction for e in per_h])), None)
    return ShapResult(tuple(per_h), mean)


# --- waterfall export ---------------------------------------------------------

REMAINDER = "remainder"


def waterfall_rows(expl: ShapExplanation, k: int = 10):
    """Top-``k`` features by absolute contribution plus a remainder bucket."""
    idx = expl.top(k)
    rows = [(expl.feature_names[i], float(expl.contributions[i])) for i in idx]
    rest = sorted(set(range(len(expl.contributions))) - set(idx))
    if rest:
        rows.append((f"{REMAINDER} ({len(rest)} features)", float(np.sum(expl.contributions[rest]))))
    return rows


def waterfall_export(expl: ShapExplanation, path, k: int = 10, svg: bool = True) -> list:
    """Write ``path`` (CSV) and, unless disabled, a sibling SVG waterfall."""
    rows = waterfall_rows(expl, k)
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["feature", "contribution", "base", "prediction"])
            for name, c in rows:
                w.writerow([name, repr(float(c)), repr(float(expl.base)), repr(float(expl.prediction))])
    except OSError as exc:
        raise ExplainError(f"cannot write {path}: {exc}") from exc
    written = [str(path)]
    if svg:
        from .plotting import waterfall_plot
        svg_path = str(path).rsplit(".", 1)[0] + ".svg"
        waterfall_plot(expl.base, rows, expl.prediction, svg_path,
                       title="7-day mean" if expl.horizon is None else f"horizon {expl.horizon}")
        written.append(svg_path)
    return written


def read_waterfall(path):
    """Rows ``(feature, contribution)`` plus ``(base, prediction)`` from an exported CSV."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ExplainError(f"{path}: no rows")
    return ([(r["feature"], float(r["contribution"])) for r in rows],
            float(rows[0]["base"]), float(rows[0]["prediction"]))
