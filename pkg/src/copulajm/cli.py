"""Command-line interface: simulate | fit | predict | evaluate | study.

Each command reads a YAML run config (sections documented in the README),
optionally overridden by --seed, and writes machine-readable outputs under
--out: tab-separated tables with JSON-lines mirrors plus a JSON meta file
embedding the library version and the SHA-256 of the effective config.

Exit codes: 0 success, 2 usage or schema error, 3 fit did not converge,
4 numeric failure. --threads controls process-level parallelism only and
never changes any numeric output.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from dataclasses import replace

import numpy as np

from . import __version__
from . import estimation as est
from . import prediction as pred
from . import simulation as sim
from .dataio import (ColumnBindings, correlation_from_config, design_from_config,
                     fit_report_payload, load_config, load_dataset, meta_block,
                     params_from_report, read_json, write_dataset, write_json,
                     write_table)
from .errors import DataError, JointModelError, NumericError, UsageError
from .modelcore import validate_dataset

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NO_CONVERGENCE = 3
EXIT_NUMERIC = 4


def _design_from_cfg(cfg: dict, seed_override, n_override=None) -> sim.SimDesign:
    block = cfg.get("simulate", cfg.get("study"))
    if not isinstance(block, dict) or "preset" not in block:
        raise DataError("config needs a simulate/study section with a preset")
    preset = block["preset"]
    if preset not in sim.DESIGN_PRESETS:
        raise DataError(f"unknown preset {preset!r}; "
                        f"choose from {sorted(sim.DESIGN_PRESETS)}")
    design = sim.DESIGN_PRESETS[preset]()
    n = n_override if n_override is not None else block.get("n_subjects")
    seed = seed_override if seed_override is not None else block.get("seed")
    return design.with_overrides(n_subjects=n, seed=seed)


def _fit_options(cfg_block: dict) -> est.FitOptions:
    block = dict(cfg_block or {})
    knots = block.get("knots")
    if knots is not None:
        block["knots"] = tuple(float(v) for v in knots)
    try:
        return est.FitOptions(**block)
    except TypeError as exc:
        raise DataError(f"invalid fit options: {exc}") from None


def _load_bound_dataset(cfg: dict):
    data = cfg.get("data")
    if not isinstance(data, dict):
        raise DataError("config needs a data section with measurements/subjects paths")
    model = cfg.get("model", {})
    design = design_from_config(model.get("design", {}))
    bindings = ColumnBindings(**data.get("columns", {}))
    subjects, baselines = load_dataset(data["measurements"], data["subjects"],
                                       design, bindings)
    return subjects, baselines, design


def cmd_simulate(cfg: dict, out_dir: str, seed, threads: int) -> int:
    design = _design_from_cfg(cfg, seed)
    subjects, truths = sim.simulate_dataset(design)
    keep = cfg.get("simulate", {}).get("keep_times")
    if keep is not None:
        subjects = sim.thin_schedule(subjects, [float(t) for t in keep])
    cov_names = [name for name, _ in design.covariates]
    baselines = {t["id"]: t["covariates"] for t in truths}
    paths = write_dataset(out_dir, subjects, cov_names, baselines, truths=truths)
    report = validate_dataset(subjects, dropout_time=design.schedule[-1])
    meta = meta_block(cfg)
    meta.update({"command": "simulate", "design": design.name,
                 "n_subjects": design.n_subjects, "seed": design.seed,
                 "event_fraction": report.event_fraction,
                 "censoring_fraction": 1.0 - report.event_fraction,
                 "dropout_fraction": report.dropout_fraction,
                 "n_measurements": report.n_measurements,
                 "paths": {k: os.path.basename(v) for k, v in paths.items()}})
    write_json(os.path.join(out_dir, "simulate_meta.json"), meta)
    return EXIT_OK


def cmd_fit(cfg: dict, out_dir: str, seed, threads: int) -> int:
    subjects, _, design = _load_bound_dataset(cfg)
    report = validate_dataset(subjects)
    if not report.ok:
        lines = "; ".join(f"{sid}: {msg}" for sid, msg in report.violations[:10])
        raise DataError(f"dataset violates the schema: {lines}")
    model = cfg.get("model", {})
    spec = correlation_from_config(model.get("correlation", {}))
    options = _fit_options(cfg.get("options"))
    if options.knots is None and model.get("knots") is not None:
        options = replace(options, knots=tuple(float(v) for v in model["knots"]))
    if model.get("n_pieces") is not None:
        options = replace(options, n_pieces=int(model["n_pieces"]))
    result = est.fit(subjects, spec, options=options)
    os.makedirs(out_dir, exist_ok=True)
    payload = fit_report_payload(result, design, cfg)
    write_json(os.path.join(out_dir, "fit_report.json"), payload)
    rows = [(name, result.estimates[name],
             result.se[name] if result.se else math.nan)
            for name in result.layout.natural_names()]
    write_table(os.path.join(out_dir, "fit_estimates.tsv"),
                ["param", "estimate", "se"], rows)
    return EXIT_OK if result.converged else EXIT_NO_CONVERGENCE


def cmd_predict(cfg: dict, out_dir: str, seed, threads: int) -> int:
    block = cfg.get("predict")
    if not isinstance(block, dict):
        raise DataError("config needs a predict section")
    report = read_json(block["fit_report"])
    params, layout, cov_free, design = params_from_report(report)
    data = cfg.get("data")
    bindings = ColumnBindings(**(data or {}).get("columns", {}))
    subjects, baselines = load_dataset(data["measurements"], data["subjects"],
                                       design, bindings)
    sid = str(block["subject_id"])
    match = [s for s in subjects if s.id == sid]
    if not match:
        raise UsageError(f"unknown subject id {sid!r}")
    subject = match[0]
    t = float(block["t"])
    grid_cfg = block.get("grid")
    if isinstance(grid_cfg, dict):
        grid = np.arange(float(grid_cfg["start"]), float(grid_cfg["stop"]) + 1e-9,
                         float(grid_cfg.get("step", 1.0)))
    elif grid_cfg:
        grid = np.asarray([float(u) for u in grid_cfg])
    else:
        raise DataError("predict section needs a grid")
    bands = block.get("bands")
    use_seed = int(seed if seed is not None else block.get("seed", 0))
    if bands:
        fit_like = est.FitResult(
            params_hat=params, layout=layout, loglik=report["loglik"],
            n_params=report["n_params"], converged=bool(report["converged"]),
            iterations=report["iterations"], clamp_events=report["clamp_events"],
            hessian_condition=report["hessian_condition"],
            estimates=report["estimates"], se=report["se"], cov_free=cov_free)
        curve = pred.predict_band(subject, fit_like, t, grid,
                                  L=int(bands.get("L", 500)),
                                  level=float(bands.get("level", 0.95)),
                                  seed=use_seed)
    else:
        curve = pred.predict_survival(subject, params, t, grid)
    mean_t = pred.mean_survival_time(subject, params, t)
    traj = pred.fitted_trajectory(subject, params, t, grid, design,
                                  baselines[sid], b_hat=curve.b_hat)
    os.makedirs(out_dir, exist_ok=True)
    header = ["u", "pi", "lower", "upper", "trajectory"]
    rows = []
    for i, u in enumerate(curve.grid):
        rows.append((u, curve.point[i],
                     curve.lower[i] if curve.lower is not None else math.nan,
                     curve.upper[i] if curve.upper is not None else math.nan,
                     traj[i]))
    write_table(os.path.join(out_dir, "prediction.tsv"), header, rows)
    meta = meta_block(cfg)
    meta.update({"command": "predict", "subject_id": sid, "t": t,
                 "b_hat": curve.b_hat.tolist(), "eb_fallback": curve.eb_fallback,
                 "mean_survival_time": ("inf" if math.isinf(mean_t) else mean_t),
                 "L": curve.L})
    write_json(os.path.join(out_dir, "predict_meta.json"), meta)
    return EXIT_OK


def cmd_evaluate(cfg: dict, out_dir: str, seed, threads: int) -> int:
    block = cfg.get("evaluate")
    if not isinstance(block, dict):
        raise DataError("config needs an evaluate section")
    report = read_json(block["fit_report"])
    params, layout, _, design = params_from_report(report)
    data = cfg.get("data")
    bindings = ColumnBindings(**(data or {}).get("columns", {}))
    subjects, _ = load_dataset(data["measurements"], data["subjects"],
                               design, bindings)
    windows = [(float(t), float(u)) for t, u in block.get("windows", [])]
    if not windows:
        raise DataError("evaluate section needs windows: [[t, u], ...]")
    loo = bool(block.get("loo", False))
    spec = params.corr
    options = _fit_options(cfg.get("options"))
    rows = []
    for t, u in windows:
        if loo:
            preds = []
            for s in subjects:
                if not s.obs_time > t:
                    continue
                rest = [o for o in subjects if o.id != s.id]
                refit = est.fit(rest, spec,
                                options=replace(options, compute_se=False,
                                                nm_iter=0, optimizer="quasi-newton",
                                                knots=tuple(params.knots.tolist())),
                                init=params)
                preds.extend(pred.window_predictions([s], refit.params_hat, t, u))
        else:
            preds = pred.window_predictions(subjects, params, t, u)
        rep = pred.evaluate_auc_pe(preds, t, u)
        rows.append((t, u, rep.auc, rep.pe, rep.n_comparable_pairs,
                     int(rep.auc_defined)))
    os.makedirs(out_dir, exist_ok=True)
    write_table(os.path.join(out_dir, "metrics.tsv"),
                ["t", "u", "auc", "pe", "n_comparable_pairs", "auc_defined"], rows)
    meta = meta_block(cfg)
    meta.update({"command": "evaluate", "loo": loo,
                 "weighting": pred.AUC_PE_WEIGHTING})
    write_json(os.path.join(out_dir, "evaluate_meta.json"), meta)
    return EXIT_OK


def cmd_study(cfg: dict, out_dir: str, seed, threads: int) -> int:
    block = cfg.get("study")
    if not isinstance(block, dict):
        raise DataError("config needs a study section")
    design = _design_from_cfg(cfg, seed, n_override=block.get("n_subjects"))
    all_specs = sim.scenario_specs(design.name)
    wanted = block.get("scenarios") or list(all_specs)
    fit_specs = {}
    for name in wanted:
        if isinstance(name, dict):
            fit_specs[name["name"]] = correlation_from_config(name)
        elif name in all_specs:
            fit_specs[name] = all_specs[name]
        else:
            raise DataError(f"unknown scenario {name!r} for design {design.name!r}")
    options = _fit_options(cfg.get("options"))
    n_reps = int(block.get("n_reps", 2))
    study = sim.run_replication_study(design, fit_specs, n_reps,
                                      options=options, threads=threads)
    os.makedirs(out_dir, exist_ok=True)
    header = ["scenario", "param", "truth", "est", "se", "sd", "rmse", "cp", "ecp"]
    rows = [(r["scenario"], r["param"], r.get("truth", math.nan), r["est"],
             r["se"], r["sd"], r.get("rmse", math.nan), r.get("cp", math.nan),
             r.get("ecp", math.nan)) for r in study.rows]
    write_table(os.path.join(out_dir, "study_table.tsv"), header, rows)
    comp_rows = [(a, b, study.aic_wins[(a, b)],
                  study.lrt_rejections.get((a, b), math.nan), study.n_reps)
                 for (a, b) in study.aic_wins]
    write_table(os.path.join(out_dir, "study_comparisons.tsv"),
                ["scenario_a", "scenario_b", "aic_wins_b", "lrt_rejections", "n_reps"],
                comp_rows)
    meta = meta_block(cfg)
    meta.update({"command": "study", "design": design.name, "n_reps": study.n_reps,
                 "n_failed": study.n_failed, "loglik_means": study.loglik_means,
                 "failures": [list(map(str, f)) for f in study.failures]})
    write_json(os.path.join(out_dir, "study_meta.json"), meta)
    return EXIT_OK


_COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "study": cmd_study,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="copulajm",
        description="Gaussian-copula joint models for longitudinal and "
                    "time-to-event data")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        cp = sub.add_parser(name)
        cp.add_argument("--config", required=True, help="YAML run configuration")
        cp.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
        cp.add_argument("--threads", type=int, default=1,
                        help="process-level parallelism (never changes results)")
        cp.add_argument("--out", required=True, help="output directory")
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else 0
    try:
        cfg = load_config(args.config)
        return _COMMANDS[args.command](cfg, args.out, args.seed, args.threads)
    except (UsageError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except JointModelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
