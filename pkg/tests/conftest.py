import numpy as np
import pytest

from cwripple.circuit import SimConfig
from cwripple.dataset import SweepGrid, enumerate_cases, make_record


def synthetic_records(grid=SweepGrid(), seed=0):
    """Records with plausible shapes but no circuit simulation behind them.

    The waveform is a sawtooth whose amplitude follows a made-up ripple law,
    so theory, residual and regime bookkeeping can be exercised cheaply.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(256) / 256
    out = []
    for case in enumerate_cases(grid):
        p = case.params
        vdc = 2 * p.n_stages * p.vin_peak * 0.97
        amp = (vdc / p.r_load) / (p.freq * p.cap) * p.n_stages ** 2 * rng.uniform(0.6, 0.9)
        wave = vdc + amp * (t - 0.5) + amp * 0.05 * np.sin(6 * np.pi * t)
        out.append(make_record(case, wave))
    return out


@pytest.fixture(scope="session")
def fake_records():
    return synthetic_records()


FAST_SIM = SimConfig(steps_per_cycle=256, max_cycles=400, settle_rel_tol=1e-4)


# ---------------------------------------------------------------------------
# default-grid dataset shared by the acceptance and dataset-property tests

import hashlib
import json
import os
import time
from pathlib import Path

import cwripple
from cwripple.config import RunConfig
from cwripple.cli import main
from cwripple.dataset import default_workers, read_csv, run_sweep, write_csv

FRESH_ENV = "CWRIPPLE_FRESH_SWEEP"
_SOURCES = ("circuit.py", "features.py", "theory.py", "dataset.py", "rng.py")


def _sweep_key(cfg: RunConfig) -> str:
    h = hashlib.sha256()
    pkg = Path(cwripple.__file__).parent
    for name in _SOURCES:
        h.update((pkg / name).read_bytes())
    doc = cfg.to_dict()
    doc.pop("workers")
    h.update(json.dumps(doc, sort_keys=True).encode())
    return h.hexdigest()[:16]


@pytest.fixture(scope="session")
def default_sweep(request):
    """(records, info) for the default 324-case sweep.

    The CSV is cached under pytest's cache directory, keyed by the simulator
    sources and default settings; set CWRIPPLE_FRESH_SWEEP=1 to rebuild.
    ``info`` holds the wall time, worker count and whether the cache was hit.
    """
    cfg = RunConfig()
    cache = Path(request.config.cache.mkdir("cwripple_default_sweep"))
    key = _sweep_key(cfg)
    csv_path, info_path = cache / f"{key}.csv", cache / f"{key}.json"
    if csv_path.exists() and info_path.exists() and not os.environ.get(FRESH_ENV):
        info = json.loads(info_path.read_text())
        info["cached"] = True
        return read_csv(csv_path), info
    workers = default_workers()
    t0 = time.perf_counter()
    records = run_sweep(cfg.grid, cfg.sim, workers=workers, base=cfg.base)
    elapsed = time.perf_counter() - t0
    write_csv(records, csv_path)
    info = {"seconds": elapsed, "workers": workers, "key": key}
    info_path.write_text(json.dumps(info))
    info["cached"] = False
    return read_csv(csv_path), info


@pytest.fixture(scope="session")
def trained(default_sweep, tmp_path_factory):
    """Two independent CLI training + evaluation runs on the default dataset."""
    runs = []
    for name in ("a", "b"):
        d = tmp_path_factory.mktemp(f"accept_{name}")
        write_csv(default_sweep[0], d / "data.csv")
        assert main(["train", "--data", str(d / "data.csv"), "--model-out", str(d / "model.json"),
                     "--report-dir", str(d / "train")]) == 0
        assert main(["evaluate", "--model", str(d / "model.json"), "--data", str(d / "data.csv"),
                     "--out-dir", str(d / "eval")]) == 0
        runs.append(d)
    return runs



# ---------------------------------------------------------------------------
# one summary line per acceptance criterion

_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    def record(number: int, passed: bool, detail: str):
        _CRITERIA[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(_CRITERIA[number])
        assert passed, detail

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
