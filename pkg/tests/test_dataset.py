import dataclasses
import math

import numpy as np
import pytest

from conftest import FAST_SIM
from cwripple.dataset import (
    CSV_COLUMNS,
    FEATURE_COLUMNS,
    SchemaError,
    SweepGrid,
    build_feature_matrix,
    correlation_matrix,
    enumerate_cases,
    read_csv,
    run_sweep,
    split,
    usable,
    write_csv,
)
from cwripple.hybrid import REGIMES


def test_default_grid_enumeration():
    cases = enumerate_cases()
    assert len(cases) == 324 == SweepGrid().size
    assert [c.case_id for c in cases] == list(range(324))
    first, second, last = cases[0].params, cases[1].params, cases[-1].params
    assert (first.n_stages, first.vin_peak, first.cap, first.freq, first.r_load) == (2, 5e3, 1e-6, 50.0, 6e6)
    assert second.r_load == 12e6  # rload varies fastest
    assert (last.n_stages, last.r_load) == (8, 60e6)
    assert first.esr == 0.5


def test_small_grids():
    assert len(enumerate_cases(SweepGrid((2,), (5,), (1,), (50,), (6,)))) == 1
    assert len(enumerate_cases(SweepGrid(stages=(2, 4)))) == 162


@pytest.mark.parametrize("kwargs", [dict(stages=()), dict(cap_uf=(5, 1)), dict(freq_hz=(0, 50)),
                                    dict(stages=(2.5,))])
def test_grid_invariants(kwargs):
    with pytest.raises(ValueError):
        SweepGrid(**kwargs)


def test_regime_counts(fake_records):
    counts = {spec.name: sum(spec.predicate(r) for r in fake_records) for spec in REGIMES}
    assert counts == {"high_stage": 162, "low_frequency": 216, "heavy_load": 216, "critical": 72}


def test_record_identities(fake_records):
    for r in fake_records:
        assert r.residual_v == r.vpp_sim_v - r.vpp_theory_v
        assert r.i_load_a == r.vdc_v / r.rload_ohm
        assert r.ripple_factor_sim == pytest.approx(r.vrms_sim_v / r.vdc_v, rel=1e-15)


def test_csv_round_trip(tmp_path, fake_records):
    path = tmp_path / "d.csv"
    write_csv(fake_records, path)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# cwripple-dataset schema_version=1")
    assert lines[1] == ",".join(CSV_COLUMNS)
    back = read_csv(path)
    assert back == fake_records
    for a, b in zip(back, fake_records):
        for name in FEATURE_COLUMNS:
            assert np.float64(getattr(a, name)).tobytes() == np.float64(getattr(b, name)).tobytes()
        assert a.residual_v + a.vpp_theory_v == a.vpp_sim_v or math.isclose(
            a.residual_v + a.vpp_theory_v, a.vpp_sim_v, rel_tol=1e-15)


def _rewrite(path, transform):
    lines = [l for l in path.read_text().splitlines() if not l.startswith("#")]
    rows = [l.split(",") for l in lines]
    path.write_text("\n".join(",".join(r) for r in transform(rows)) + "\n")


def test_shuffled_columns_accepted(tmp_path, fake_records):
    path = tmp_path / "d.csv"
    write_csv(fake_records[:20], path)
    order = list(reversed(range(len(CSV_COLUMNS))))
    _rewrite(path, lambda rows: [[r[i] for i in order] for r in rows])
    assert read_csv(path) == fake_records[:20]


def test_missing_column_is_schema_error(tmp_path, fake_records):
    path = tmp_path / "d.csv"
    write_csv(fake_records[:5], path)
    drop = CSV_COLUMNS.index("residual_v")
    _rewrite(path, lambda rows: [r[:drop] + r[drop + 1:] for r in rows])
    with pytest.raises(SchemaError, match="residual_v"):
        read_csv(path)


def test_bad_cell_is_schema_error(tmp_path, fake_records):
    path = tmp_path / "d.csv"
    write_csv(fake_records[:5], path)
    text = path.read_text().replace("true", "maybe", 1)
    path.write_text(text)
    with pytest.raises(SchemaError):
        read_csv(path)


def test_feature_matrix_examples(fake_records):
    rec = next(r for r in fake_records if r.n_stages == 6 and r.freq_hz == 50 and r.cap_f == 1e-6)
    fm = build_feature_matrix(fake_records)
    row = dict(zip(fm.columns, fm.values[fake_records.index(rec)]))
    assert row["n2_over_fc"] == pytest.approx(720_000, rel=1e-12)
    four = next(r for r in fake_records if r.n_stages == 4)
    row = dict(zip(fm.columns, fm.values[fake_records.index(four)]))
    assert (row["stage_2"], row["stage_4"], row["stage_6"], row["stage_8"]) == (0, 1, 0, 0)
    one_hot = fm.values[:, [i for i, c in enumerate(fm.columns) if c.startswith(("stage_", "vin_"))]]
    assert np.all(one_hot.sum(axis=1) == 2)
    assert fm.columns[-7:] == ["stage_2", "stage_4", "stage_6", "stage_8", "vin_5k", "vin_15k", "vin_25k"]
    assert np.array_equal(fm.target, [r.residual_v for r in fake_records])


def test_il_over_fc_example(fake_records):
    rec = dataclasses.replace(fake_records[0], vdc_v=30e3, rload_ohm=6e6, freq_hz=100.0, cap_f=5e-6,
                              i_load_a=30e3 / 6e6)
    fm = build_feature_matrix([rec], stage_levels=[2, 4, 6, 8], vin_levels=[5e3, 15e3, 25e3])
    assert dict(zip(fm.columns, fm.values[0]))["il_over_fc"] == pytest.approx(10.0, rel=1e-12)


def test_params_mode_uses_parameters_only(fake_records):
    fm = build_feature_matrix(fake_records, mode="params")
    assert not {"std_v", "skewness", "kurtosis", "crest_factor", "il_over_fc"} & set(fm.columns)
    changed = [dataclasses.replace(r, std_v=-1.0, skewness=9.0, vdc_v=1.0) for r in fake_records]
    assert np.array_equal(build_feature_matrix(changed, mode="params").values, fm.values)


def test_non_finite_feature_names_case(fake_records):
    bad = dataclasses.replace(fake_records[7], skewness=float("nan"))
    with pytest.raises(ValueError, match="case 7"):
        build_feature_matrix([fake_records[0], bad])


def test_correlation_matrix(fake_records):
    c = correlation_matrix(build_feature_matrix(fake_records))
    assert c.shape[0] == c.shape[1]
    assert np.allclose(np.diag(c)[np.diag(c) != 0], 1.0)


def test_split_sizes_and_determinism(fake_records):
    train, test = split(fake_records, 0.8, seed=0)
    assert (len(train), len(test)) == (256, 68)
    for n in (2, 4, 6, 8):
        assert sum(r.n_stages == n for r in train) == 64
        assert sum(r.n_stages == n for r in test) == 17
    ids = [r.case_id for r in train + test]
    assert sorted(ids) == list(range(324))
    again = split(fake_records, 0.8, seed=0)
    assert [r.case_id for r in again[0]] == [r.case_id for r in train]
    other = split(fake_records, 0.8, seed=1)
    assert [r.case_id for r in other[0]] != [r.case_id for r in train]
    assert len(other[0]) == 256


def test_split_errors(fake_records):
    with pytest.raises(ValueError):
        split(fake_records, 1.0)
    lonely = [r for r in fake_records if r.n_stages != 2] + [fake_records[0]]
    with pytest.raises(ValueError):
        split(lonely)


def test_usable_filters(fake_records):
    recs = list(fake_records[:4])
    recs[1] = dataclasses.replace(recs[1], converged=False)
    recs[2] = dataclasses.replace(recs[2], vpp_sim_v=float("nan"))
    assert [r.case_id for r in usable(recs)] == [0, 3]
    assert [r.case_id for r in usable(recs, include_unconverged=True)] == [0, 1, 3]


SMALL = SweepGrid(stages=(1, 2), vin_kv=(5,), cap_uf=(1, 10), freq_hz=(100, 500), rload_mohm=(6,))


def test_sweep_bytes_independent_of_workers(tmp_path):
    one = run_sweep(SMALL, FAST_SIM, workers=1)
    two = run_sweep(SMALL, FAST_SIM, workers=3)
    write_csv(one, tmp_path / "a.csv")
    write_csv(two, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert [r.case_id for r in one] == list(range(SMALL.size))


def test_failed_case_recorded_not_raised(monkeypatch):
    import cwripple.dataset as ds

    def boom(params, config):
        if params.cap > 5e-6:
            raise RuntimeError("solver exploded")
        return real(params, config)

    real = ds.simulate
    monkeypatch.setattr(ds, "simulate", boom)
    records = run_sweep(SMALL, FAST_SIM, workers=1)
    failed = [r for r in records if r.failed]
    assert len(failed) == 4 and all("solver exploded" in r.error for r in failed)
    assert all(math.isnan(r.residual_v) and not r.converged for r in failed)


def test_waveform_dump(tmp_path):
    grid = SweepGrid((1,), (5,), (1,), (500,), (6,))
    run_sweep(grid, FAST_SIM, waveform_dir=tmp_path / "w")
    assert (tmp_path / "w" / "case_0000.csv").read_text().startswith("t_s,v_out_v\n")
