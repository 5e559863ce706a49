"""Static SVG figures with byte-stable output.

Every figure is drawn from data that is also written to CSV. SVG ids are
salted with a fixed string and the date metadata is dropped so identical
inputs give identical files.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_RC = {
    "svg.hashsalt": "edforecast",
    "svg.fonttype": "none",
    "font.family": "DejaVu Sans",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
}
MODEL_COLORS = {"actual": "black", "lstm": "#1b9e77", "sarimax": "#d95f02",
                "gbt": "#7570b3", "baseline": "#999999"}


def _save(fig, path) -> str:
    with matplotlib.rc_context(_RC):
        fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return str(path)


def _figure(*args, **kwargs):
    with matplotlib.rc_context(_RC):
        return plt.subplots(*args, **kwargs)


def impute_plot(dates, before, after, window, path, title: str = "") -> str:
    """Observed counts with the imputed window overlaid."""
    fig, ax = _figure(figsize=(9, 3.2))
    x = np.arange(len(dates))
    ax.plot(x, before, color="#999999", lw=0.6, label="observed")
    mask = np.array([window[0] <= d <= window[1] for d in dates])
    y = np.where(mask, np.asarray(after, dtype=float), np.nan)
    ax.plot(x, y, color="#d95f02", lw=0.8, label="counterfactual")
    ax.axvspan(int(np.argmax(mask)), len(mask) - 1 - int(np.argmax(mask[::-1])),
               color="#d95f02", alpha=0.08, lw=0)
    _date_ticks(ax, dates)
    ax.set_ylabel("admissions per day")
    ax.set_title(title)
    ax.legend(frameon=False, loc="upper left")
    fig.tight_layout()
    return _save(fig, path)


def _date_ticks(ax, dates, n: int = 6):
    idx = np.linspace(0, len(dates) - 1, min(n, len(dates))).round().astype(int)
    ax.set_xticks(idx)
    ax.set_xticklabels([dates[i].isoformat() for i in idx])


def weeks_plot(diag, path, title: str = "") -> str:
    """Best (left) and worst (right) 7-day windows per model."""
    models = [m for m in diag.models]
    fig, axes = _figure(len(models), 2, figsize=(8, 2.1 * len(models)), squeeze=False)
    for row, m in enumerate(models):
        for col, week in enumerate(("best", "worst")):
            ax = axes[row, col]
            actual = getattr(m, f"{week}_actual")
            pred = getattr(m, f"{week}_predicted")
            h = np.arange(1, len(actual) + 1)
            ax.plot(h, actual, "o-", color=MODEL_COLORS["actual"], lw=1, ms=3, label="actual")
            ax.plot(h, pred, "s--", color=MODEL_COLORS.get(m.model, "C0"), lw=1, ms=3, label=m.model)
            origin = getattr(m, f"{week}_origin")
            ax.set_title(f"{m.model} {week} week from {origin.isoformat()} "
                         f"(MAE {getattr(m, f'{week}_mae'):.2f})", fontsize=8)
            ax.set_xticks(h)
            if row == len(models) - 1:
                ax.set_xlabel("days ahead")
            ax.legend(frameon=False, fontsize=7)
    fig.suptitle(title or f"{diag.series}, seed {diag.seed}")
    fig.tight_layout()
    return _save(fig, path)


def importance_plot(rows, path, top: int = 20, title: str = "Gain importance") -> str:
    rows = list(rows)[:top]
    fig, ax = _figure(figsize=(6, 0.28 * max(len(rows), 1) + 1.0))
    names = [r[0] for r in rows][::-1]
    shares = [r[2] for r in rows][::-1]
    ax.barh(np.arange(len(rows)), shares, color="#7570b3")
    ax.set_yticks(np.arange(len(rows)))
    ax.set_yticklabels(names, fontsize=7)
    ax.set_xlabel("share of total gain")
    ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def waterfall_plot(base, rows, prediction, path, title: str = "") -> str:
    """Horizontal waterfall from the expected value to the prediction."""
    fig, ax = _figure(figsize=(6.5, 0.32 * (len(rows) + 2) + 1.0))
    running = base
    labels = []
    for i, (name, c) in enumerate(rows):
        ax.barh(i, c, left=running, color="#1b9e77" if c >= 0 else "#d95f02", height=0.6)
        running += c
        labels.append(name)
    ax.axvline(base, color="#999999", lw=0.8, ls=":")
    ax.axvline(prediction, color="black", lw=0.8)
    ax.set_yticks(np.arange(len(rows)))
    ax.set_yticklabels(labels, fontsize=7)
    ax.invert_yaxis()
    ax.set_xlabel(f"E[f(x)] = {base:.3f}   f(x) = {prediction:.3f}")
    ax.set_title(f"SHAP waterfall {title}".strip())
    fig.tight_layout()
    return _save(fig, path)


def metrics_plot(report, path, view: str = "All", metric: str = "mae") -> str:
    """Grouped bars of the mean metric per ward and model."""
    rows = [r for r in report.table_rows() if r[0] == view and r[3] == metric]
    wards = list(dict.fromkeys(r[1] for r in rows))
    models = list(dict.fromkeys(r[2] for r in rows))
    fig, ax = _figure(figsize=(9, 3.4))
    width = 0.8 / max(len(models), 1)
    for j, m in enumerate(models):
        vals = [next((r[4].mean for r in rows if r[1] == w and r[2] == m), np.nan) for w in wards]
        ax.bar(np.arange(len(wards)) + j * width, vals, width, label=m, color=MODEL_COLORS.get(m, None))
    ax.set_xticks(np.arange(len(wards)) + 0.4 - width / 2)
    ax.set_xticklabels(wards, rotation=30, ha="right", fontsize=7)
    ax.set_ylabel(metric.upper())
    ax.set_title(f"{metric.upper()} by ward, {view} complexity")
    ax.legend(frameon=False, fontsize=7)
    fig.tight_layout()
    return _save(fig, path)
