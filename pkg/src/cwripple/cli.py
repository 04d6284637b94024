"""``cwripple`` command line: sweep, train, evaluate, predict, export-plots.

Exit codes: 0 success, 1 usage/I-O/schema error, 2 sweep finished but some
cases failed to simulate.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from . import dataset as ds
from . import hybrid, plots
from .circuit import CaseParams, read_waveform_csv
from .config import CONFIG_ENV_VAR, ConfigError, RunConfig, apply_overrides, load_config
from .forest import feature_importance, load_model, predict, save_model
from .theory import ripple_factor, ripple_rms_from_pp

log = logging.getLogger("cwripple")

_D = RunConfig()


def _floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text):
    return [int(v) for v in text.split(",") if v.strip()]


def _depths(text):
    out = []
    for v in text.split(","):
        v = v.strip().lower()
        if v:
            out.append(None if v in ("none", "inf", "unlimited") else int(v))
    return out


def _strs(text):
    return [v.strip() for v in text.split(",") if v.strip()]


def _csv(values) -> str:
    return ",".join("none" if v is None else f"{v:g}" if isinstance(v, float) else str(v) for v in values)


def _add_config(p):
    p.add_argument("--config", metavar="JSON",
                   help=f"run configuration file (default: ${CONFIG_ENV_VAR} if set, else built-in defaults)")


def _add_grid(p):
    g = p.add_argument_group("sweep grid (comma-separated lists)")
    g.add_argument("--stages", type=_ints, help=f"stage counts N (default: {_csv(_D.grid.stages)})")
    g.add_argument("--vin-kv", type=_floats, help=f"peak input voltage, kV (default: {_csv(_D.grid.vin_kv)})")
    g.add_argument("--cap-uf", type=_floats, help=f"stage capacitance, uF (default: {_csv(_D.grid.cap_uf)})")
    g.add_argument("--freq-hz", type=_floats, help=f"input frequency, Hz (default: {_csv(_D.grid.freq_hz)})")
    g.add_argument("--rload-mohm", type=_floats,
                   help=f"load resistance, MOhm (default: {_csv(_D.grid.rload_mohm)})")


def _add_circuit(p):
    g = p.add_argument_group("component model")
    g.add_argument("--esr-ohm", type=float, help=f"capacitor ESR, Ohm (default: {_D.base.esr:g})")
    g.add_argument("--diode-vf", type=float, help=f"diode forward drop, V (default: {_D.base.diode_vf:g})")
    g.add_argument("--diode-ron", type=float, help=f"diode on-resistance, Ohm (default: {_D.base.diode_ron:g})")
    g.add_argument("--diode-goff", type=float,
                   help=f"diode off-state conductance, S (default: {_D.base.diode_goff:g})")


def _add_sim(p):
    g = p.add_argument_group("transient solver")
    g.add_argument("--steps-per-cycle", type=int,
                   help=f"backward-Euler steps per input cycle (default: {_D.sim.steps_per_cycle})")
    g.add_argument("--max-cycles", type=int, help=f"cycle limit per case (default: {_D.sim.max_cycles})")
    g.add_argument("--settle-rel-tol", type=float,
                   help=f"relative cycle-mean change counted as settled (default: {_D.sim.settle_rel_tol:g})")
    g.add_argument("--settle-consecutive", type=int,
                   help=f"settled cycles required in a row (default: {_D.sim.settle_consecutive})")
    g.add_argument("--max-diode-iters", type=int,
                   help=f"diode-state sweeps per step (default: {_D.sim.max_diode_iters})")


def _add_training(p):
    g = p.add_argument_group("model selection")
    g.add_argument("--n-trees", type=_ints, help=f"trees per forest (default: {_csv(_D.forest.n_trees)})")
    g.add_argument("--max-depth", type=_depths,
                   help=f"tree depth limits, 'none' = unlimited (default: {_csv(_D.forest.max_depth)})")
    g.add_argument("--min-samples-leaf", type=_ints,
                   help=f"minimum rows per leaf (default: {_csv(_D.forest.min_samples_leaf)})")
    g.add_argument("--feature-fraction", type=_strs,
                   help="features tried per split: number, 'a/b' or 'sqrt' "
                        f"(default: {_csv(_D.forest.feature_fraction)})")
    g.add_argument("--cv-folds", type=int, help=f"cross-validation folds (default: {_D.forest.cv_folds})")
    g.add_argument("--split-seed", type=int, help=f"train/test split seed (default: {_D.split_seed})")
    g.add_argument("--cv-seed", type=int, help=f"fold assignment seed (default: {_D.cv_seed})")
    g.add_argument("--forest-seed", type=int, help=f"forest master seed (default: {_D.forest_seed})")
    g.add_argument("--feature-mode", choices=ds.FEATURE_MODES,
                   help="'full' uses waveform statistics (a simulated waveform is needed to predict); "
                        f"'params' uses circuit parameters only (default: {_D.feature_mode})")
    g.add_argument("--include-unconverged", action="store_const", const=True,
                   help="train on cases whose simulation did not settle (default: excluded)")


def _resolve(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    names = ["stages", "vin_kv", "cap_uf", "freq_hz", "rload_mohm", "esr_ohm", "steps_per_cycle",
             "max_cycles", "settle_rel_tol", "settle_consecutive", "max_diode_iters", "split_seed",
             "cv_seed", "forest_seed", "feature_mode", "include_unconverged", "workers"]
    values = {n: getattr(args, n, None) for n in names}
    values["diode_vf_v"] = getattr(args, "diode_vf", None)
    values["diode_ron_ohm"] = getattr(args, "diode_ron", None)
    values["diode_goff_s"] = getattr(args, "diode_goff", None)
    for name in ("n_trees", "max_depth", "min_samples_leaf", "feature_fraction", "cv_folds"):
        values[f"forest_{name}"] = getattr(args, name, None)
    try:
        return apply_overrides(cfg, values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_sweep(args) -> int:
    cfg = _resolve(args)
    out = Path(args.out)
    manifest_path = Path(args.manifest) if args.manifest else out.with_suffix(".manifest.json")
    n_cases = cfg.grid.size
    log.info("sweeping %d cases with %d worker(s)", n_cases, cfg.n_workers)
    done = [0]
    timings = {}

    def progress(rec, seconds):
        done[0] += 1
        timings[rec.case_id] = seconds
        status = "FAILED" if rec.failed else ("ok" if rec.converged else "not settled")
        log.info("[%3d/%d] case %d: %s (%.2f s)", done[0], n_cases, rec.case_id, status, seconds)

    t0 = time.perf_counter()
    records = ds.run_sweep(cfg.grid, cfg.sim, workers=cfg.n_workers, base=cfg.base,
                           waveform_dir=args.waveform_dir, progress=progress)
    elapsed = time.perf_counter() - t0
    ds.write_csv(records, out)
    failed = [r for r in records if r.failed]
    manifest = {
        "config": cfg.to_dict(),
        "n_cases": len(records),
        "dataset": str(out),
        "non_converged_case_ids": [r.case_id for r in records if not r.converged and not r.failed],
        "failed_cases": [{"case_id": r.case_id, "error": r.error} for r in failed],
        # wall-clock figures: the only non-reproducible part of any artifact
        "timing": {"total_s": round(elapsed, 3),
                   "per_case_s": {str(k): round(v, 4) for k, v in sorted(timings.items())}},
    }
    _write(manifest_path, json.dumps(manifest, indent=1) + "\n")
    print(f"wrote {len(records)} cases to {out} ({elapsed:.1f} s); manifest {manifest_path}")
    if manifest["non_converged_case_ids"]:
        print(f"{len(manifest['non_converged_case_ids'])} case(s) did not settle: "
              f"{manifest['non_converged_case_ids']}")
    if failed:
        print(f"{len(failed)} case(s) failed; see manifest", file=sys.stderr)
        return 2
    return 0


def _importance_lines(model) -> list[str]:
    scores = feature_importance(model)
    ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
    return [f"  {name:<20}{score:8.4f}" for name, score in ranked]


def cmd_train(args) -> int:
    cfg = _resolve(args)
    records = ds.read_csv(args.data)
    report_dir = Path(args.report_dir)
    mode = cfg.feature_mode
    pool = ds.usable(records, cfg.include_unconverged)
    stages = sorted({r.n_stages for r in pool})
    vins = sorted({r.vin_peak_v for r in pool})
    n_features = len(ds.feature_columns(stages, vins, mode))
    grid = cfg.forest.expand(n_features, cfg.forest_seed)

    def progress(i, n, row):
        log.info("cv %d/%d  %s  mean RMSE %.3f", i, n, row["hyperparams"].label(), row["mean_rmse"])

    result = hybrid.train_pipeline(records, split_seed=cfg.split_seed, grid=grid, cv_seed=cfg.cv_seed,
                                   forest_seed=cfg.forest_seed, k=cfg.forest.cv_folds, mode=mode,
                                   include_unconverged=cfg.include_unconverged, progress=progress)
    save_model(result.model, args.model_out)

    # the report file stays path-free so identical inputs give identical bytes
    text = [f"usable rows: {len(pool)}  train: {len(result.train)}  "
            f"test: {len(result.test)}  feature mode: {mode}", "",
            f"{cfg.forest.cv_folds}-fold cross-validation on the training split:",
            hybrid.cv_table_text(result.cv_table),
            f"selected: {result.best.label()}", "",
            hybrid.global_table_text(result.global_rows, "Global comparison (held-out test split)"),
            result.test_report.to_text(),
            result.full_report.to_text(),
            "Feature importance (residual model):", *_importance_lines(result.model), ""]
    report = "\n".join(text)
    print(f"dataset: {args.data}")
    print(report)
    _write(report_dir / "train_report.txt", report)
    _write(report_dir / "cv_table.csv", hybrid.cv_table_csv(result.cv_table))
    _write(report_dir / "global_test.csv", hybrid.global_table_csv(result.global_rows))
    _write(report_dir / "regimes_test.csv", result.test_report.to_csv())
    _write(report_dir / "regimes_full.csv", result.full_report.to_csv())
    imp = sorted(feature_importance(result.model).items(), key=lambda kv: (-kv[1], kv[0]))
    _write(report_dir / "importances.csv",
           "feature,importance\n" + "".join(f"{k},{v:.10g}\n" for k, v in imp))
    print(f"model written to {args.model_out}; reports in {report_dir}")
    return 0


def _check_compatible(model, records):
    stages, vins = ds.levels_from_columns(model.feature_names)
    mode = model.metadata.get("feature_mode", "full")
    expected = ds.feature_columns(stages, vins, mode)
    problems = []
    if expected != list(model.feature_names):
        problems.append(f"model columns {model.feature_names} are not a {mode}-mode feature set")
    data_stages = sorted({r.n_stages for r in records})
    data_vins = sorted({r.vin_peak_v for r in records})
    missing_s = [n for n in data_stages if n not in stages]
    missing_v = [ds.vin_column(v) for v in data_vins if ds.vin_column(v) not in
                 [ds.vin_column(x) for x in vins]]
    if missing_s:
        problems.append(f"dataset stage counts without a model column: {missing_s}")
    if missing_v:
        problems.append(f"dataset input voltages without a model column: {missing_v}")
    if problems:
        raise ConfigError("model and dataset features differ:\n  " + "\n  ".join(problems))


def _evaluation_outputs(model, records, out_dir: Path) -> list[Path]:
    written = []
    full = hybrid.evaluate_model(model, records, "Full dataset (training rows are in-sample)",
                                 skip_empty=True)
    written.append(_write(out_dir / "regimes_full.csv", full.to_csv()))
    texts = [full.to_text()]
    test_ids = set(model.metadata.get("test_case_ids", []))
    test = [r for r in records if r.case_id in test_ids]
    if test:
        test_rep = hybrid.evaluate_model(model, test, "Held-out test split", skip_empty=True)
        written.append(_write(out_dir / "regimes_test.csv", test_rep.to_csv()))
        texts.append(test_rep.to_text())
        written.append(plots.regime_rmse(test_rep, out_dir / "regime_rmse_test.png"))
        fm_test = ds.build_feature_matrix(test, model.metadata.get("feature_mode", "full"),
                                          *ds.levels_from_columns(model.feature_names))
        written.append(plots.predicted_vs_true_residual(
            fm_test.target, hybrid.predict_residuals(model, test), out_dir / "residual_pred_vs_true.png"))
    written.append(_write(out_dir / "regimes.txt", "\n".join(texts)))
    rows = hybrid.export_residual_vs_frequency(records)
    written.append(_write(out_dir / "residual_vs_frequency.csv", hybrid.residual_vs_frequency_csv(rows)))
    written.append(plots.residual_vs_frequency(records, out_dir / "residual_vs_frequency.png"))
    written.append(plots.regime_rmse(full, out_dir / "regime_rmse_full.png"))
    written.append(plots.feature_importance(model.feature_names, list(model.importances),
                                            out_dir / "feature_importance.png"))
    print("\n".join(texts))
    return written


def cmd_evaluate(args) -> int:
    model = load_model(args.model)
    records = ds.usable(ds.read_csv(args.data), include_unconverged=True)
    _check_compatible(model, records)
    written = _evaluation_outputs(model, records, Path(args.out_dir))
    print("wrote " + ", ".join(str(p) for p in written))
    return 0


def cmd_predict(args) -> int:
    model = load_model(args.model)
    mode = model.metadata.get("feature_mode", "full")
    params = CaseParams(n_stages=args.stages, vin_peak=args.vin_kv * 1e3, cap=args.cap_uf * 1e-6,
                        freq=args.freq_hz, r_load=args.rload_mohm * 1e6)
    case = ds.Case(-1, params)
    if args.waveform:
        record = ds.make_record(case, read_waveform_csv(args.waveform))
    elif mode == "full":
        raise ConfigError(
            "this model was trained in 'full' feature mode: its inputs include the standard "
            "deviation, skewness, kurtosis and crest factor of the steady-state ripple and the "
            "load current from the simulated DC level, which only exist once the case has been "
            "simulated. Pass --waveform with a t_s,v_out_v CSV (e.g. from 'sweep --waveform-dir'), "
            "or use a model trained with --feature-mode params.")
    else:
        record = ds.failed_record(case, "not simulated")
    stages, vins = ds.levels_from_columns(model.feature_names)
    fm = ds.build_feature_matrix([record], mode, stages, vins, with_target=False)
    residual = float(predict(model, fm)[0])
    theory_vpp = float(hybrid.theory_baseline([record], mode)[0])
    corrected = float(hybrid.corrected_prediction([theory_vpp], [residual])[0])
    if mode == "full":
        v_dc = record.vdc_v
        i_load = record.i_load_a
    else:
        v_dc = 2.0 * params.n_stages * params.vin_peak
        i_load = ds.ideal_load_current(record)
    out = {
        "inputs": {"n_stages": params.n_stages, "vin_peak_v": params.vin_peak, "cap_f": params.cap,
                   "freq_hz": params.freq, "rload_ohm": params.r_load},
        "feature_mode": mode,
        "v_dc_v": v_dc,
        "v_dc_source": "simulated waveform" if mode == "full" else "ideal no-load output 2*N*Vin",
        "i_load_a": i_load,
        "vpp_theory_v": theory_vpp,
        "residual_pred_v": residual,
        "vpp_corrected_v": corrected,
        "ripple_factor_theory": ripple_factor(ripple_rms_from_pp(theory_vpp), v_dc),
        "ripple_factor_corrected": ripple_factor(ripple_rms_from_pp(corrected), v_dc),
    }
    if args.waveform:
        out["vpp_waveform_v"] = record.vpp_sim_v
        out["ripple_factor_waveform"] = record.ripple_factor_sim
    print(json.dumps(out, indent=1))
    return 0


def cmd_export_plots(args) -> int:
    records = ds.usable(ds.read_csv(args.data), include_unconverged=True)
    out_dir = Path(args.out_dir)
    written = []
    rows = hybrid.export_residual_vs_frequency(records)
    written.append(_write(out_dir / "residual_vs_frequency.csv", hybrid.residual_vs_frequency_csv(rows)))
    if records:
        written.append(plots.residual_vs_frequency(records, out_dir / "residual_vs_frequency.png"))
        written.append(plots.mean_abs_residual_bars(
            hybrid.mean_abs_residual_by(records, "n_stages"), "Stages N",
            out_dir / "residual_by_stage.png", "Mean |residual| by stage count"))
        written.append(plots.mean_abs_residual_bars(
            hybrid.mean_abs_residual_by(records, "freq_hz"), "Frequency (Hz)",
            out_dir / "residual_by_frequency.png", "Mean |residual| by frequency"))
    if args.model:
        model = load_model(args.model)
        _check_compatible(model, records)
        written += _evaluation_outputs(model, records, out_dir)
    print("wrote " + ", ".join(str(p) for p in written))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cwripple",
        description="Cockcroft-Walton ripple: transient sweep, residual forest, regime reports.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sweep", help="simulate the parameter grid and write the dataset CSV",
                       description="Simulate every grid case from a cold start to steady state and "
                                   "write one dataset row per case plus a JSON run manifest.")
    _add_config(p)
    p.add_argument("--out", default="dataset.csv", help="dataset CSV path (default: dataset.csv)")
    p.add_argument("--manifest", help="run manifest path (default: <out>.manifest.json)")
    p.add_argument("--waveform-dir", help="also dump each case's final cycle as t_s,v_out_v CSV here")
    p.add_argument("--workers", type=int, help="parallel simulation processes (default: all CPUs)")
    _add_grid(p)
    _add_circuit(p)
    _add_sim(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("train", help="fit the residual forest and report test metrics",
                       description="Stratified 80/20 split, grid search with k-fold CV on the "
                                   "training part, refit, and theory-vs-corrected evaluation.")
    _add_config(p)
    p.add_argument("--data", required=True, help="dataset CSV written by 'sweep'")
    p.add_argument("--model-out", default="model.json", help="model JSON path (default: model.json)")
    p.add_argument("--report-dir", default="reports/train", help="report directory (default: reports/train)")
    _add_training(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="regime tables, CSVs and figures for a trained model",
                       description="Global and regime-wise theory vs corrected metrics on the full "
                                   "dataset and on the model's held-out split.")
    p.add_argument("--model", required=True, help="model JSON")
    p.add_argument("--data", required=True, help="dataset CSV")
    p.add_argument("--out-dir", default="reports/eval", help="output directory (default: reports/eval)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="corrected ripple for one design point (JSON to stdout)",
                       description="Theory, predicted residual and corrected peak-to-peak ripple for "
                                   "one case. Full-mode models need the case's steady-state waveform.")
    p.add_argument("--model", required=True, help="model JSON")
    p.add_argument("--stages", type=int, required=True, help="stage count N")
    p.add_argument("--vin-kv", type=float, required=True, help="peak input voltage, kV")
    p.add_argument("--cap-uf", type=float, required=True, help="stage capacitance, uF")
    p.add_argument("--freq-hz", type=float, required=True, help="input frequency, Hz")
    p.add_argument("--rload-mohm", type=float, required=True, help="load resistance, MOhm")
    p.add_argument("--waveform", help="steady-state cycle CSV with header t_s,v_out_v")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("export-plots", help="residual-vs-frequency CSV and report figures",
                       description="Write the residual-vs-frequency table and PNG figures; with "
                                   "--model also the model evaluation figures.")
    p.add_argument("--data", required=True, help="dataset CSV")
    p.add_argument("--model", help="model JSON (optional)")
    p.add_argument("--out-dir", default="reports/plots", help="output directory (default: reports/plots)")
    p.set_defaults(func=cmd_export_plots)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, ds.SchemaError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
