"""Theory-plus-learned-residual ripple prediction and its evaluation.

The forest never predicts ripple directly. It predicts the residual
``vpp_sim - vpp_theory`` and the corrected estimate is ``vpp_theory +
residual_hat``. Errors are reported as ``prediction - target``, so a theory
that underestimates ripple shows a negative bias.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import dataset as ds
from .dataset import CaseRecord, FeatureMatrix
from .forest import ForestHyperparams, ForestModel, default_search_grid, fit, grid_search_cv, predict

log = logging.getLogger(__name__)

HEAVY_LOAD_OHM = 12e6


class EmptyRegimeError(ValueError):
    pass


class ClampWarning(RuntimeWarning):
    """A corrected ripple estimate came out negative and was clamped to zero."""


@dataclass(frozen=True)
class RegimeSpec:
    name: str
    title: str
    predicate: Callable[[CaseRecord], bool]

    def select(self, records: Sequence[CaseRecord]) -> np.ndarray:
        return np.array([bool(self.predicate(r)) for r in records], dtype=bool)


def _high_stage(r):
    return r.n_stages >= 6


def _low_freq(r):
    return r.freq_hz <= 100.0


def _heavy_load(r):
    return r.rload_ohm <= HEAVY_LOAD_OHM


REGIMES: tuple[RegimeSpec, ...] = (
    RegimeSpec("high_stage", "High stage (N>=6)", _high_stage),
    RegimeSpec("low_frequency", "Low frequency (f<=100 Hz)", _low_freq),
    RegimeSpec("heavy_load", "Heavy load (R<=12 MOhm)", _heavy_load),
    RegimeSpec("critical", "Critical (all three)",
               lambda r: _high_stage(r) and _low_freq(r) and _heavy_load(r)),
)
GLOBAL = RegimeSpec("global", "Global", lambda r: True)


@dataclass(frozen=True)
class MetricSet:
    rmse: float
    mae: float
    bias: float
    r2: float
    n_cases: int


def metrics(predictions, targets) -> MetricSet:
    """RMSE, MAE, bias and R^2 of ``predictions`` against ``targets``.

    Raises ``ValueError`` on length mismatch, empty input, or constant
    targets (R^2 undefined).
    """
    p = np.asarray(predictions, dtype=float)
    t = np.asarray(targets, dtype=float)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ValueError("no cases")
    e = p - t
    sst = float(np.sum((t - t.mean()) ** 2))
    if sst == 0:
        raise ValueError("R^2 undefined for constant targets")
    return MetricSet(
        rmse=float(np.sqrt(np.mean(e * e))),
        mae=float(np.mean(np.abs(e))),
        bias=float(np.mean(e)),
        r2=float(1.0 - np.sum(e * e) / sst),
        n_cases=int(p.size),
    )


def _metrics_or_nan_r2(predictions, targets) -> MetricSet:
    try:
        return metrics(predictions, targets)
    except ValueError:
        e = np.asarray(predictions, float) - np.asarray(targets, float)
        if e.size == 0:
            raise
        return MetricSet(float(np.sqrt(np.mean(e * e))), float(np.mean(np.abs(e))),
                         float(np.mean(e)), float("nan"), int(e.size))


def residual_targets(records: Sequence[CaseRecord]) -> np.ndarray:
    out = np.empty(len(records))
    for i, r in enumerate(records):
        if not (math.isfinite(r.vpp_sim_v) and math.isfinite(r.vpp_theory_v)):
            raise ValueError(f"case {r.case_id}: non-finite simulated or theoretical ripple")
        out[i] = r.vpp_sim_v - r.vpp_theory_v
    return out


def corrected_prediction(theory_vpp, predicted_residual) -> np.ndarray:
    """``theory + residual_hat``, with negative results clamped to 0."""
    theory_vpp = np.asarray(theory_vpp, dtype=float)
    corrected = theory_vpp + np.asarray(predicted_residual, dtype=float)
    for i in np.flatnonzero(corrected < 0):
        warnings.warn(f"row {i}: corrected ripple {corrected[i]:.6g} V < 0 clamped to 0", ClampWarning,
                      stacklevel=2)
    return np.where(corrected < 0, 0.0, corrected)


def theory_baseline(records: Sequence[CaseRecord], mode: str = "full") -> np.ndarray:
    """Classical ripple each feature mode corrects (see :func:`dataset.build_feature_matrix`)."""
    if mode == "full":
        return np.array([r.vpp_theory_v for r in records])
    return np.array([ds.params_theory_vpp(r) for r in records])


# ---------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class RegimeRow:
    name: str
    title: str
    theory: MetricSet
    corrected: MetricSet

    @property
    def n_cases(self) -> int:
        return self.theory.n_cases

    @property
    def rmse_reduction_pct(self) -> float:
        if self.theory.rmse == 0:
            return float("nan")
        return 100.0 * (1.0 - self.corrected.rmse / self.theory.rmse)


@dataclass
class RegimeReport:
    label: str
    rows: list[RegimeRow]

    def row(self, name: str) -> RegimeRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    CSV_HEADER = ("regime", "n_cases", "rmse_theory_v", "rmse_corrected_v", "mae_theory_v",
                  "mae_corrected_v", "bias_theory_v", "bias_corrected_v", "r2_theory",
                  "r2_corrected", "rmse_reduction_pct")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_HEADER)
        for r in self.rows:
            w.writerow([r.name, r.n_cases] + [_num(v) for v in (
                r.theory.rmse, r.corrected.rmse, r.theory.mae, r.corrected.mae, r.theory.bias,
                r.corrected.bias, r.theory.r2, r.corrected.r2, r.rmse_reduction_pct)])
        return buf.getvalue()

    def to_text(self) -> str:
        """Regimes as columns, metrics as rows (the layout of the regime table)."""
        names = [r.title for r in self.rows]
        width = max(14, *(len(n) for n in names)) + 2
        lines = [self.label, "Metric".ljust(22) + "".join(n.rjust(width) for n in names)]
        spec = [
            ("Cases", lambda r: f"{r.n_cases:d}"),
            ("RMSE theory (V)", lambda r: f"{r.theory.rmse:.2f}"),
            ("RMSE corrected (V)", lambda r: f"{r.corrected.rmse:.2f}"),
            ("MAE theory (V)", lambda r: f"{r.theory.mae:.2f}"),
            ("MAE corrected (V)", lambda r: f"{r.corrected.mae:.2f}"),
            ("Bias theory (V)", lambda r: f"{r.theory.bias:.2f}"),
            ("Bias corrected (V)", lambda r: f"{r.corrected.bias:.2f}"),
            ("R2 theory", lambda r: f"{r.theory.r2:.4f}"),
            ("R2 corrected", lambda r: f"{r.corrected.r2:.4f}"),
            ("RMSE reduction (%)", lambda r: f"{r.rmse_reduction_pct:.1f}"),
        ]
        for label, fmt in spec:
            lines.append(label.ljust(22) + "".join(fmt(r).rjust(width) for r in self.rows))
        return "\n".join(lines) + "\n"


def _num(v: float) -> str:
    return format(v, ".10g")


def evaluate_regimes(records: Sequence[CaseRecord], theory_preds, corrected_preds,
                     label: str = "", skip_empty: bool = False) -> RegimeReport:
    """Theory vs corrected metrics on the global set and each canonical regime.

    Targets are the simulated ``vpp_sim_v`` of ``records``.
    """
    target = np.array([r.vpp_sim_v for r in records], dtype=float)
    theory_preds = np.asarray(theory_preds, dtype=float)
    corrected_preds = np.asarray(corrected_preds, dtype=float)
    if not (len(target) == len(theory_preds) == len(corrected_preds)):
        raise ValueError("records and prediction vectors are not aligned")
    rows = []
    for regime in (GLOBAL,) + REGIMES:
        mask = regime.select(records)
        if not mask.any():
            if skip_empty:
                continue
            raise EmptyRegimeError(f"regime {regime.name} has no cases")
        rows.append(RegimeRow(regime.name, regime.title,
                              _metrics_or_nan_r2(theory_preds[mask], target[mask]),
                              _metrics_or_nan_r2(corrected_preds[mask], target[mask])))
    return RegimeReport(label, rows)


@dataclass(frozen=True)
class ModelRow:
    name: str
    metrics: MetricSet


def global_table_text(rows: Sequence[ModelRow], label: str) -> str:
    lines = [label, f"{'Model':<22}{'RMSE (V)':>12}{'MAE (V)':>12}{'Bias (V)':>12}{'R2':>10}"]
    for r in rows:
        m = r.metrics
        lines.append(f"{r.name:<22}{m.rmse:>12.2f}{m.mae:>12.2f}{m.bias:>12.2f}{m.r2:>10.4f}")
    return "\n".join(lines) + "\n"


def global_table_csv(rows: Sequence[ModelRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("model", "n_cases", "rmse_v", "mae_v", "bias_v", "r2"))
    for r in rows:
        m = r.metrics
        w.writerow([r.name, m.n_cases, _num(m.rmse), _num(m.mae), _num(m.bias), _num(m.r2)])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class TrainingResult:
    model: ForestModel
    best: ForestHyperparams
    cv_table: list[dict]
    train: list[CaseRecord]
    test: list[CaseRecord]
    test_report: RegimeReport
    full_report: RegimeReport
    global_rows: list[ModelRow]
    test_residual_true: np.ndarray
    test_residual_pred: np.ndarray
    direct_model: ForestModel | None = None
    notes: list[str] = field(default_factory=list)


def predict_residuals(model: ForestModel | None, records: Sequence[CaseRecord]) -> np.ndarray:
    """Residual estimates for ``records``; ``model=None`` is the zero-residual baseline."""
    if model is None:
        return np.zeros(len(records))
    mode = model.metadata.get("feature_mode", "full")
    stages, vins = ds.levels_from_columns(model.feature_names)
    fm = ds.build_feature_matrix(records, mode, stages, vins)
    return predict(model, fm)


def corrected_for(model: ForestModel | None, records: Sequence[CaseRecord]):
    mode = "full" if model is None else model.metadata.get("feature_mode", "full")
    base = theory_baseline(records, mode)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ClampWarning)
        return base, corrected_prediction(base, predict_residuals(model, records))


def evaluate_model(model: ForestModel | None, records: Sequence[CaseRecord], label: str,
                   skip_empty: bool = False) -> RegimeReport:
    """Regime report of ``model`` on ``records`` (classical theory vs corrected)."""
    _, corrected = corrected_for(model, records)
    theory_full = theory_baseline(records, "full")
    return evaluate_regimes(records, theory_full, corrected, label, skip_empty)


def train_pipeline(records: Sequence[CaseRecord], split_seed: int = 0,
                   grid: Sequence[ForestHyperparams] | None = None, cv_seed: int = 0,
                   forest_seed: int = 0, k: int = 5, mode: str = "full",
                   include_unconverged: bool = False, direct_baseline: bool = True,
                   progress=None) -> TrainingResult:
    """Split, grid-search, refit on the training part, evaluate.

    Regime reports are produced on the held-out test split and on the full
    dataset; the latter covers every case but is partly
    in-sample, which its label says.
    """
    pool = ds.usable(records, include_unconverged)
    if len(pool) < 50:
        raise ValueError(f"need at least 50 usable records, got {len(pool)}")
    stages = sorted({r.n_stages for r in pool})
    vins = sorted({r.vin_peak_v for r in pool})
    train, test = ds.split(pool, 0.8, split_seed)
    fm_train = ds.build_feature_matrix(train, mode, stages, vins)
    fm_test = ds.build_feature_matrix(test, mode, stages, vins)
    if grid is None:
        grid = default_search_grid(len(fm_train.columns), forest_seed)
    best, table = grid_search_cv(fm_train, fm_train.target, grid, k=k, seed=cv_seed, progress=progress)
    model = fit(fm_train, fm_train.target, best)
    model.metadata.update({
        "feature_mode": mode,
        "dataset_schema_version": ds.DATASET_SCHEMA_VERSION,
        "split_seed": int(split_seed),
        "cv_seed": int(cv_seed),
        "cv_folds": int(k),
        "train_case_ids": [r.case_id for r in train],
        "test_case_ids": [r.case_id for r in test],
    })

    theory_test = theory_baseline(test, "full")
    base_test, corrected_test = corrected_for(model, test)
    test_report = evaluate_regimes(test, theory_test, corrected_test,
                                   "Held-out test split", skip_empty=True)
    full_report = evaluate_model(model, pool, "Full dataset (training rows are in-sample)",
                                 skip_empty=True)

    sim_test = np.array([r.vpp_sim_v for r in test])
    rows = [ModelRow("Classical theory", _metrics_or_nan_r2(theory_test, sim_test))]
    direct = None
    if direct_baseline:
        sim_train = np.array([r.vpp_sim_v for r in train])
        direct = fit(fm_train, sim_train, best)
        rows.append(ModelRow("RFR (direct ML)", _metrics_or_nan_r2(predict(direct, fm_test), sim_test)))
    rows.append(ModelRow("Hybrid (corrected)", _metrics_or_nan_r2(corrected_test, sim_test)))

    return TrainingResult(model=model, best=best, cv_table=table, train=train, test=test,
                          test_report=test_report, full_report=full_report, global_rows=rows,
                          test_residual_true=fm_test.target,
                          test_residual_pred=predict(model, fm_test), direct_model=direct)


def cv_table_text(table: Sequence[dict]) -> str:
    lines = [f"{'#':>3}  {'hyperparameters':<44}{'mean RMSE':>12}{'std':>10}"]
    for i, row in enumerate(table):
        lines.append(f"{i:>3}  {row['hyperparams'].label():<44}{row['mean_rmse']:>12.3f}"
                     f"{row['std_rmse']:>10.3f}")
    return "\n".join(lines) + "\n"


def cv_table_csv(table: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    k = len(table[0]["fold_rmse"]) if table else 0
    w.writerow(["n_trees", "max_depth", "min_samples_leaf", "feature_fraction", "mean_rmse", "std_rmse"]
               + [f"fold{j}_rmse" for j in range(k)])
    for row in table:
        hp = row["hyperparams"]
        w.writerow([hp.n_trees, "" if hp.max_depth is None else hp.max_depth, hp.min_samples_leaf,
                    _num(hp.feature_fraction), _num(row["mean_rmse"]), _num(row["std_rmse"])]
                   + [_num(v) for v in row["fold_rmse"]])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# residual structure


RESIDUAL_FREQ_HEADER = ("freq_hz", "mean_abs_residual_v", "max_abs_residual_v", "n_cases")


def export_residual_vs_frequency(records: Sequence[CaseRecord]) -> list[tuple[float, float, float, int]]:
    """Per-frequency mean and max ``|residual_v|``, ascending in frequency."""
    groups: dict[float, list[float]] = {}
    for r in records:
        if math.isfinite(r.residual_v):
            groups.setdefault(r.freq_hz, []).append(abs(r.residual_v))
    return [(f, float(np.mean(v)), float(np.max(v)), len(v)) for f, v in sorted(groups.items())]


def residual_vs_frequency_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESIDUAL_FREQ_HEADER)
    for f, mean, mx, n in rows:
        w.writerow([_num(f), _num(mean), _num(mx), n])
    return buf.getvalue()


def mean_abs_residual_by(records: Sequence[CaseRecord], key: str) -> dict[float, float]:
    groups: dict[float, list[float]] = {}
    for r in records:
        if math.isfinite(r.residual_v):
            groups.setdefault(getattr(r, key), []).append(abs(r.residual_v))
    return {k: float(np.mean(v)) for k, v in sorted(groups.items())}
