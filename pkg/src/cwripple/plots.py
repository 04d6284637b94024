"""Report figures. Everything renders off-screen to PNG files."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "figure.dpi": 100,
}

THEORY_COLOR = "#b2182b"
CORRECTED_COLOR = "#2166ac"


def _new(width=4.8, height=3.4):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(width, height))
    return fig, ax


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(STYLE):
        fig.tight_layout()
        # no timestamp/version metadata so reruns write identical bytes
        fig.savefig(path, dpi=150, metadata={"Software": None})
    plt.close(fig)
    return path


def residual_vs_frequency(records, path):
    """Scatter of residual ripple against drive frequency, one colour per stage count."""
    fig, ax = _new()
    stages = sorted({r.n_stages for r in records})
    cmap = plt.get_cmap("viridis", max(len(stages), 2))
    for i, n in enumerate(stages):
        sel = [r for r in records if r.n_stages == n and np.isfinite(r.residual_v)]
        # small horizontal jitter keeps overlapping grid points readable
        jitter = 1.0 + 0.04 * (i - (len(stages) - 1) / 2)
        ax.scatter([r.freq_hz * jitter for r in sel], [r.residual_v for r in sel], s=10,
                   color=cmap(i), alpha=0.75, label=f"N={n}")
    ax.axhline(0.0, color="k", lw=0.8)
    ax.set_xscale("log")
    ax.set_xlabel("Frequency (Hz)")
    ax.set_ylabel("Residual  $V_{pp}^{sim} - V_{pp}^{theory}$ (V)")
    ax.set_title("Residual ripple vs. operating frequency")
    ax.legend(loc="best")
    return _save(fig, path)


def mean_abs_residual_bars(by_value: dict, xlabel: str, path, title: str):
    fig, ax = _new(4.0, 3.0)
    keys = list(by_value)
    ax.bar([str(k if not float(k).is_integer() else int(k)) for k in keys], list(by_value.values()),
           color=CORRECTED_COLOR)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("Mean |residual| (V)")
    ax.set_title(title)
    return _save(fig, path)


def predicted_vs_true_residual(true, pred, path, title="Predicted vs. simulated residual (test split)"):
    fig, ax = _new(4.0, 4.0)
    true = np.asarray(true)
    pred = np.asarray(pred)
    ax.scatter(true, pred, s=12, color=CORRECTED_COLOR, alpha=0.8)
    lo = float(min(true.min(), pred.min()))
    hi = float(max(true.max(), pred.max()))
    ax.plot([lo, hi], [lo, hi], "k--", lw=0.8)
    ax.set_xlabel("Simulated residual (V)")
    ax.set_ylabel("Predicted residual (V)")
    ax.set_title(title)
    return _save(fig, path)


def feature_importance(names: Sequence[str], scores: Sequence[float], path):
    order = np.argsort(-np.asarray(scores), kind="mergesort")
    fig, ax = _new(4.8, 0.25 * len(names) + 1.2)
    ax.barh([names[i] for i in order][::-1], [scores[i] for i in order][::-1], color=CORRECTED_COLOR)
    ax.set_xlabel("Normalised impurity decrease")
    ax.set_title("Residual-model feature importance")
    return _save(fig, path)


def regime_rmse(report, path):
    """Grouped bars of theory vs corrected RMSE for each row of a regime report."""
    fig, ax = _new(5.2, 3.2)
    x = np.arange(len(report.rows))
    ax.bar(x - 0.2, [r.theory.rmse for r in report.rows], 0.4, color=THEORY_COLOR, label="Theory")
    ax.bar(x + 0.2, [r.corrected.rmse for r in report.rows], 0.4, color=CORRECTED_COLOR,
           label="Corrected")
    ax.set_xticks(x)
    ax.set_xticklabels([r.name.replace("_", "\n") for r in report.rows])
    ax.set_ylabel("RMSE (V)")
    ax.set_title(report.label)
    ax.legend()
    return _save(fig, path)
