"""Parametric sweep, dataset records, ML feature matrices and splits.

Dataset CSV layout (schema version 1)::

    # cwripple-dataset schema_version=1 kurtosis=pearson moments=population crest=ac-component
    case_id,n_stages,vin_peak_v,cap_f,freq_hz,rload_ohm,vdc_v,vpp_sim_v,vrms_sim_v,std_v,
    skewness,kurtosis,crest_factor,i_load_a,vpp_theory_v,ripple_factor_theory,
    ripple_factor_sim,residual_v,converged

(the header is a single line). Floats carry 17 significant digits so a
write/read cycle is exact. Columns are matched by name, so their order in a
file does not matter. Cases whose simulation failed keep their row with
``nan`` in every simulated column and ``converged=false``.
"""

from __future__ import annotations

import csv
import itertools
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import theory
from .circuit import CaseParams, SimConfig, simulate, write_waveform_csv
from .features import extract_features
from .rng import SplitMix64

log = logging.getLogger(__name__)

DATASET_SCHEMA_VERSION = 1
SCHEMA_COMMENT = (f"# cwripple-dataset schema_version={DATASET_SCHEMA_VERSION} "
                  "kurtosis=pearson moments=population crest=ac-component")

FEATURE_COLUMNS = (
    "n_stages", "vin_peak_v", "cap_f", "freq_hz", "rload_ohm",
    "vdc_v", "vpp_sim_v", "vrms_sim_v", "std_v", "skewness", "kurtosis", "crest_factor",
    "i_load_a", "vpp_theory_v", "ripple_factor_theory", "ripple_factor_sim", "residual_v",
)
CSV_COLUMNS = ("case_id",) + FEATURE_COLUMNS + ("converged",)

FEATURE_MODES = ("full", "params")


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class SweepGrid:
    stages: tuple[int, ...] = (2, 4, 6, 8)
    vin_kv: tuple[float, ...] = (5.0, 15.0, 25.0)
    cap_uf: tuple[float, ...] = (1.0, 5.0, 10.0)
    freq_hz: tuple[float, ...] = (50.0, 100.0, 500.0)
    rload_mohm: tuple[float, ...] = (6.0, 12.0, 60.0)

    def __post_init__(self):
        for f in fields(self):
            values = tuple(getattr(self, f.name))
            object.__setattr__(self, f.name, values)
            if not values:
                raise ValueError(f"grid dimension {f.name} is empty")
            if any(not v > 0 for v in values):
                raise ValueError(f"grid dimension {f.name} must be positive")
            if any(b <= a for a, b in zip(values, values[1:])):
                raise ValueError(f"grid dimension {f.name} must be strictly increasing")
        if any(int(s) != s for s in self.stages):
            raise ValueError("stages must be integers")

    @property
    def size(self) -> int:
        return math.prod(len(getattr(self, f.name)) for f in fields(self))


@dataclass(frozen=True)
class Case:
    case_id: int
    params: CaseParams


@dataclass
class CaseRecord:
    case_id: int
    n_stages: int
    vin_peak_v: float
    cap_f: float
    freq_hz: float
    rload_ohm: float
    vdc_v: float
    vpp_sim_v: float
    vrms_sim_v: float
    std_v: float
    skewness: float
    kurtosis: float
    crest_factor: float
    i_load_a: float
    vpp_theory_v: float
    ripple_factor_theory: float
    ripple_factor_sim: float
    residual_v: float
    converged: bool
    error: str | None = field(default=None, compare=False)

    @property
    def failed(self) -> bool:
        return not math.isfinite(self.vpp_sim_v)


def enumerate_cases(grid: SweepGrid = SweepGrid(), base=None) -> list[Case]:
    """Cartesian product, stages outermost then vin, cap, freq, rload.

    Non-grid parameters (ESR and diode model) are copied from ``base``, any
    object with ``esr``, ``diode_vf``, ``diode_ron`` and ``diode_goff``.
    """
    extra = {}
    if base is not None:
        extra = {k: getattr(base, k) for k in ("esr", "diode_vf", "diode_ron", "diode_goff")}
    cases = []
    product = itertools.product(grid.stages, grid.vin_kv, grid.cap_uf, grid.freq_hz, grid.rload_mohm)
    for case_id, (n, vin, cap, freq, rload) in enumerate(product):
        params = CaseParams(n_stages=int(n), vin_peak=vin * 1e3, cap=cap * 1e-6, freq=float(freq),
                            r_load=rload * 1e6, **extra)
        cases.append(Case(case_id, params))
    return cases


def make_record(case: Case, waveform) -> CaseRecord:
    """Join the parameters, waveform features and theory references of one case."""
    p = case.params
    feats = extract_features(waveform)
    i_load = theory.load_current(feats.v_dc, p.r_load)
    vpp_theory = theory.theoretical_ripple_pp(
        theory.TheoryInputs(p.n_stages, p.vin_peak, p.freq, p.cap, max(i_load, 0.0)))
    rf_theory = theory.ripple_factor(theory.ripple_rms_from_pp(vpp_theory), feats.v_dc)
    rf_sim = theory.ripple_factor(feats.v_rms, feats.v_dc)
    return CaseRecord(
        case_id=case.case_id, n_stages=p.n_stages, vin_peak_v=p.vin_peak, cap_f=p.cap,
        freq_hz=p.freq, rload_ohm=p.r_load, vdc_v=feats.v_dc, vpp_sim_v=feats.v_pp,
        vrms_sim_v=feats.v_rms, std_v=feats.std_dev, skewness=feats.skewness,
        kurtosis=feats.kurtosis, crest_factor=feats.crest_factor, i_load_a=i_load,
        vpp_theory_v=vpp_theory, ripple_factor_theory=rf_theory, ripple_factor_sim=rf_sim,
        residual_v=feats.v_pp - vpp_theory, converged=bool(getattr(waveform, "converged", True)),
    )


def failed_record(case: Case, error: str) -> CaseRecord:
    p = case.params
    nan = float("nan")
    return CaseRecord(case.case_id, p.n_stages, p.vin_peak, p.cap, p.freq, p.r_load,
                      *([nan] * 12), converged=False, error=error)


def _run_case(args) -> tuple[CaseRecord, float]:
    case, config, waveform_dir = args
    t0 = time.perf_counter()
    try:
        waveform = simulate(case.params, config)
        record = make_record(case, waveform)
        if waveform_dir is not None:
            write_waveform_csv(waveform, Path(waveform_dir) / f"case_{case.case_id:04d}.csv")
    except Exception as exc:  # a failed case must not abort the sweep
        record = failed_record(case, f"{type(exc).__name__}: {exc}")
    return record, time.perf_counter() - t0


def run_sweep(grid: SweepGrid = SweepGrid(), sim_config: SimConfig | None = None, workers: int = 1,
              base=None, waveform_dir=None,
              progress: Callable[[CaseRecord, float], None] | None = None) -> list[CaseRecord]:
    """Simulate every grid case; results come back ordered by ``case_id``.

    Each case is simulated independently, so the output does not depend on
    ``workers``.
    """
    sim_config = sim_config or SimConfig()
    cases = enumerate_cases(grid, base)
    if waveform_dir is not None:
        Path(waveform_dir).mkdir(parents=True, exist_ok=True)
    jobs = [(case, sim_config, waveform_dir) for case in cases]
    records = []
    if workers <= 1:
        results = map(_run_case, jobs)
        for record, seconds in results:
            records.append(record)
            if progress:
                progress(record, seconds)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for record, seconds in pool.map(_run_case, jobs, chunksize=1):
                records.append(record)
                if progress:
                    progress(record, seconds)
    records.sort(key=lambda r: r.case_id)
    return records


# ---------------------------------------------------------------------------
# CSV persistence


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return format(float(value), ".17g")


def write_csv(records: Iterable[CaseRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(SCHEMA_COMMENT + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for rec in records:
            writer.writerow([_fmt(getattr(rec, name)) for name in CSV_COLUMNS])


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1", "yes"):
        return True
    if t in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def read_csv(path) -> list[CaseRecord]:
    with open(path, newline="") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    reader = csv.DictReader(lines)
    header = [h.strip() for h in (reader.fieldnames or [])]
    missing = [c for c in CSV_COLUMNS if c not in header]
    unexpected = [c for c in header if c not in CSV_COLUMNS]
    if missing or unexpected:
        raise SchemaError(f"dataset schema mismatch in {path}: missing={missing} unexpected={unexpected}")
    records = []
    for lineno, row in enumerate(reader, start=2):
        row = {k.strip(): v for k, v in row.items()}
        try:
            values = {"case_id": int(row["case_id"]), "n_stages": int(row["n_stages"]),
                      "converged": _parse_bool(row["converged"])}
            for name in FEATURE_COLUMNS[1:]:
                values[name] = float(row[name])
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"{path}: data row {lineno}: {exc}") from None
        records.append(CaseRecord(**values))
    return records


# ---------------------------------------------------------------------------
# feature engineering


@dataclass
class FeatureMatrix:
    columns: list[str]
    values: np.ndarray
    target: np.ndarray
    case_ids: list[int]
    mode: str = "full"

    @property
    def shape(self):
        return self.values.shape


def stage_column(n: int) -> str:
    return f"stage_{int(n)}"


def vin_column(vin_peak_v: float) -> str:
    kv = vin_peak_v / 1e3
    return f"vin_{kv:g}k"


def levels_from_columns(columns: Sequence[str]) -> tuple[list[int], list[float]]:
    """Recover the one-hot category levels encoded in column names.

    Names that do not parse are skipped; callers compare the rebuilt column
    list against the original to detect them.
    """
    stages, vins = [], []
    for c in columns:
        try:
            if c.startswith("stage_"):
                stages.append(int(c[len("stage_"):]))
            elif c.startswith("vin_") and c.endswith("k"):
                vins.append(float(c[len("vin_"):-1]) * 1e3)
        except ValueError:
            continue
    return stages, vins


def ideal_load_current(rec: CaseRecord) -> float:
    return theory.ideal_output_voltage(rec.n_stages, rec.vin_peak_v) / rec.rload_ohm


def params_theory_vpp(rec: CaseRecord) -> float:
    """Classical ripple with the no-load output standing in for the simulated one."""
    return theory.theoretical_ripple_pp(theory.TheoryInputs(
        rec.n_stages, rec.vin_peak_v, rec.freq_hz, rec.cap_f, ideal_load_current(rec)))


def feature_columns(stage_levels: Sequence[int], vin_levels: Sequence[float], mode: str = "full") -> list[str]:
    if mode not in FEATURE_MODES:
        raise ValueError(f"mode must be one of {FEATURE_MODES}")
    cols = ["cap_f", "freq_hz", "rload_ohm"]
    if mode == "full":
        cols += ["std_v", "skewness", "kurtosis", "crest_factor", "n2_over_fc", "il_over_fc"]
    else:
        cols += ["n2_over_fc", "ideal_il_over_fc"]
    cols += [stage_column(n) for n in stage_levels]
    cols += [vin_column(v) for v in vin_levels]
    return cols


def build_feature_matrix(records: Sequence[CaseRecord], mode: str = "full",
                         stage_levels: Sequence[int] | None = None,
                         vin_levels: Sequence[float] | None = None,
                         with_target: bool = True) -> FeatureMatrix:
    """ML inputs and residual target for ``records``.

    ``full`` mode uses the waveform statistics and ``I_L / (f C)`` from the
    simulated DC level; the target is ``residual_v``. ``params`` mode needs
    circuit parameters only: the load current is the no-load estimate and
    the target is the residual against that parameters-only theory value.
    One-hot levels default to the distinct values present in ``records``.
    ``with_target=False`` builds inputs for prediction and leaves the target
    as ``nan`` where it cannot be computed.
    """
    if not records:
        raise ValueError("no records")
    if stage_levels is None:
        stage_levels = sorted({r.n_stages for r in records})
    if vin_levels is None:
        vin_levels = sorted({r.vin_peak_v for r in records})
    columns = feature_columns(stage_levels, vin_levels, mode)
    stage_index = {int(n): i for i, n in enumerate(stage_levels)}
    vin_index = {vin_column(v): i for i, v in enumerate(vin_levels)}
    base = len(columns) - len(stage_levels) - len(vin_levels)
    X = np.zeros((len(records), len(columns)))
    y = np.zeros(len(records))
    for i, rec in enumerate(records):
        fc = rec.freq_hz * rec.cap_f
        if mode == "full":
            row = [rec.cap_f, rec.freq_hz, rec.rload_ohm, rec.std_v, rec.skewness, rec.kurtosis,
                   rec.crest_factor, rec.n_stages ** 2 / fc, rec.i_load_a / fc]
            target = rec.residual_v
        else:
            row = [rec.cap_f, rec.freq_hz, rec.rload_ohm, rec.n_stages ** 2 / fc,
                   ideal_load_current(rec) / fc]
            target = rec.vpp_sim_v - params_theory_vpp(rec)
        if not (all(math.isfinite(v) for v in row) and (math.isfinite(target) or not with_target)):
            raise ValueError(f"case {rec.case_id}: non-finite feature or target")
        if rec.n_stages not in stage_index:
            raise ValueError(f"case {rec.case_id}: stage count {rec.n_stages} not in levels {list(stage_levels)}")
        if vin_column(rec.vin_peak_v) not in vin_index:
            raise ValueError(f"case {rec.case_id}: input voltage {rec.vin_peak_v} V not in levels")
        X[i, :base] = row
        X[i, base + stage_index[rec.n_stages]] = 1.0
        X[i, base + len(stage_levels) + vin_index[vin_column(rec.vin_peak_v)]] = 1.0
        y[i] = target
    return FeatureMatrix(columns, X, y, [r.case_id for r in records], mode)


def correlation_matrix(fm: FeatureMatrix) -> np.ndarray:
    """Pearson correlation between feature columns (report only; nothing is dropped)."""
    X = fm.values
    std = X.std(axis=0)
    Z = np.where(std > 0, (X - X.mean(axis=0)) / np.where(std > 0, std, 1.0), 0.0)
    return Z.T @ Z / X.shape[0]


# ---------------------------------------------------------------------------
# splits


def usable(records: Iterable[CaseRecord], include_unconverged: bool = False) -> list[CaseRecord]:
    """Records fit for training: finite simulation output, converged unless asked otherwise."""
    return [r for r in records if not r.failed and (r.converged or include_unconverged)]


def split(records: Sequence[CaseRecord], train_frac: float = 0.8, seed: int = 0):
    """Stratified (by ``n_stages``) seeded train/test partition.

    Strata are visited in ascending stage order, each shuffled in ``case_id``
    order by one shared SplitMix64 stream; ``floor(train_frac * size)`` rows
    go to training (kept within ``[1, size - 1]``). Both parts are returned
    sorted by ``case_id``.
    """
    if not 0 < train_frac < 1:
        raise ValueError("train_frac must be in (0, 1)")
    strata: dict[int, list[CaseRecord]] = {}
    for rec in records:
        strata.setdefault(rec.n_stages, []).append(rec)
    rng = SplitMix64(seed)
    train, test = [], []
    for n in sorted(strata):
        group = sorted(strata[n], key=lambda r: r.case_id)
        if len(group) < 2:
            raise ValueError(f"stratum n_stages={n} has fewer than 2 records")
        rng.shuffle(group)
        n_train = min(max(int(math.floor(train_frac * len(group))), 1), len(group) - 1)
        train += group[:n_train]
        test += group[n_train:]
    train.sort(key=lambda r: r.case_id)
    test.sort(key=lambda r: r.case_id)
    return train, test


def default_workers() -> int:
    return max(1, os.cpu_count() or 1)


def grid_to_dict(grid: SweepGrid) -> dict:
    return {k: list(v) for k, v in asdict(grid).items()}
