"""File formats: datasets, fit reports, result tables, and run configs.

Datasets travel as two UTF-8 tab-separated files with mandatory headers and
'.' decimals: a long-format measurements file (one row per measurement: id,
time, response) and a subjects file (one row per subject: id, observation
time, event indicator, baseline covariates). Design matrices are never stored;
they are rebuilt from the column-role bindings ("1", "t", a covariate name, or
"t*<name>") declared in the run config, so the files stay plain data.

Every machine-readable output embeds the library version and a SHA-256 hash of
the effective run configuration. Floats are serialized with `repr` (shortest
round-trip form) and tables get a JSON-lines mirror, which keeps reruns
byte-identical and diffable.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np
import yaml

from . import __version__
from .errors import DataError, UsageError
from .modelcore import CorrelationSpec, DesignInfo, ModelParams, ParamLayout, SubjectRecord
from .statmath import CholeskyFactor


@dataclass(frozen=True)
class ColumnBindings:
    """Names of the mandatory columns in the two dataset files."""

    id: str = "id"
    time: str = "time"
    y: str = "y"
    obs_time: str = "obs_time"
    event: str = "event"


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_table(path: str, header: Sequence[str], rows: Sequence[Sequence]):
    """Tab-separated table plus a .jsonl mirror next to it."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(_fmt(v) for v in row) + "\n")
    mirror = os.path.splitext(path)[0] + ".jsonl"
    with open(mirror, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            record = {k: (None if isinstance(v, float) and math.isnan(v) else v)
                      for k, v in zip(header, _row_jsonable(row))}
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    return path, mirror


def _row_jsonable(row):
    out = []
    for v in row:
        if isinstance(v, (np.integer,)):
            out.append(int(v))
        elif isinstance(v, (np.floating,)):
            out.append(float(v))
        elif isinstance(v, float) and math.isinf(v):
            out.append("inf" if v > 0 else "-inf")
        else:
            out.append(v)
    return out


def write_json(path: str, payload: dict):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1, default=_json_default)
        fh.write("\n")
    return path


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)!r}")


def read_json(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

def write_dataset(out_dir: str, subjects: Sequence[SubjectRecord],
                  covariate_names: Sequence[str],
                  baselines: Mapping[str, Mapping[str, float]],
                  truths: Optional[Sequence[dict]] = None,
                  bindings: ColumnBindings = ColumnBindings()):
    """Write measurements/subjects (and optional hidden-truth) files."""
    os.makedirs(out_dir, exist_ok=True)
    meas_path = os.path.join(out_dir, "measurements.tsv")
    meas_rows = [(s.id, t, v) for s in subjects for t, v in zip(s.times, s.y)]
    write_table(meas_path, [bindings.id, bindings.time, bindings.y], meas_rows)
    subj_path = os.path.join(out_dir, "subjects.tsv")
    header = [bindings.id, bindings.obs_time, bindings.event, *covariate_names]
    rows = [(s.id, s.obs_time, s.event,
             *[baselines[s.id][c] for c in covariate_names]) for s in subjects]
    write_table(subj_path, header, rows)
    paths = {"measurements": meas_path, "subjects": subj_path}
    if truths is not None:
        truth_path = os.path.join(out_dir, "truth.tsv")
        r = len(truths[0]["b"]) if truths else 0
        header = ["id", "t_star", *[f"b_{k}" for k in range(r)]]
        rows = [(t["id"], t["t_star"], *[float(v) for v in t["b"]]) for t in truths]
        write_table(truth_path, header, rows)
        paths["truth"] = truth_path
    return paths


def _read_tsv(path: str) -> list:
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh, delimiter="\t")
            if reader.fieldnames is None:
                raise DataError(f"{path}: missing header row")
            return list(reader)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None


def _need(row, col, path, line):
    if col not in row or row[col] in (None, ""):
        raise DataError(f"{path}: row {line}: missing column {col!r}")
    return row[col]


def load_dataset(measurements_path: str, subjects_path: str, design: DesignInfo,
                 bindings: ColumnBindings = ColumnBindings()):
    """Load SubjectRecords; returns (subjects, baselines-by-id).

    Measurements belonging to unknown subject ids, non-numeric fields and
    missing columns are schema errors listing the offending row.
    """
    subj_rows = _read_tsv(subjects_path)
    meas_rows = _read_tsv(measurements_path)
    cov_names = design.baseline_names()
    baselines = {}
    meta = {}
    order = []
    for i, row in enumerate(subj_rows, start=2):
        sid = _need(row, bindings.id, subjects_path, i)
        if sid in meta:
            raise DataError(f"{subjects_path}: row {i}: duplicate subject id {sid!r}")
        try:
            obs_time = float(_need(row, bindings.obs_time, subjects_path, i))
            event = int(float(_need(row, bindings.event, subjects_path, i)))
            baselines[sid] = {c: float(_need(row, c, subjects_path, i)) for c in cov_names}
        except ValueError as exc:
            raise DataError(f"{subjects_path}: row {i}: {exc}") from None
        meta[sid] = (obs_time, event)
        order.append(sid)
    series = {sid: ([], []) for sid in meta}
    for i, row in enumerate(meas_rows, start=2):
        sid = _need(row, bindings.id, measurements_path, i)
        if sid not in series:
            raise DataError(f"{measurements_path}: row {i}: unknown subject id {sid!r}")
        try:
            series[sid][0].append(float(_need(row, bindings.time, measurements_path, i)))
            series[sid][1].append(float(_need(row, bindings.y, measurements_path, i)))
        except ValueError as exc:
            raise DataError(f"{measurements_path}: row {i}: {exc}") from None
    subjects = []
    for sid in order:
        times, y = series[sid]
        idx = np.argsort(times, kind="stable")
        times = np.asarray(times, dtype=float)[idx]
        y = np.asarray(y, dtype=float)[idx]
        obs_time, event = meta[sid]
        subjects.append(SubjectRecord(
            id=sid, times=times, y=y,
            x_rows=design.x_at(baselines[sid], times),
            z_rows=design.z_at(times),
            w=design.w_of(baselines[sid]),
            obs_time=obs_time, event=event))
    return subjects, baselines


# ---------------------------------------------------------------------------
# configs
# ---------------------------------------------------------------------------

def load_config(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = yaml.safe_load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise DataError(f"config {path} is not valid YAML: {exc}") from None
    if not isinstance(cfg, dict):
        raise DataError(f"config {path} must be a mapping at top level")
    return cfg


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, default=_json_default)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def meta_block(cfg: dict) -> dict:
    return {"version": __version__, "config_sha256": config_hash(cfg),
            "config": cfg}


def correlation_from_config(block: Mapping) -> CorrelationSpec:
    if not isinstance(block, Mapping):
        raise DataError("correlation section must be a mapping")
    kwargs = {}
    for key in ("within", "cross"):
        if key in block:
            kwargs[key] = str(block[key])
    for key in ("rho_y", "rho_ty", "t_ref"):
        if block.get(key) is not None:
            kwargs[key] = float(block[key])
    if block.get("exponents") is not None:
        kwargs["exponents"] = tuple(float(e) for e in block["exponents"])
    if block.get("slot_times") is not None:
        kwargs["slot_times"] = tuple(float(t) for t in block["slot_times"])
    try:
        return CorrelationSpec(**kwargs)
    except UsageError as exc:
        raise DataError(f"invalid correlation section: {exc}") from None


def correlation_to_config(spec: CorrelationSpec) -> dict:
    out = {"within": spec.within, "cross": spec.cross,
           "rho_y": spec.rho_y, "rho_ty": spec.rho_ty}
    if spec.t_ref is not None:
        out["t_ref"] = spec.t_ref
    if spec.exponents is not None:
        out["exponents"] = list(spec.exponents)
    if spec.slot_times is not None:
        out["slot_times"] = list(spec.slot_times)
    return out


def design_from_config(block: Mapping) -> DesignInfo:
    try:
        return DesignInfo(fixed=tuple(block["fixed"]), random=tuple(block["random"]),
                          survival=tuple(block["survival"]))
    except (KeyError, TypeError) as exc:
        raise DataError(f"invalid design section (need fixed/random/survival): {exc}") \
            from None


# ---------------------------------------------------------------------------
# fit reports
# ---------------------------------------------------------------------------

def fit_report_payload(result, design: DesignInfo, cfg: dict) -> dict:
    layout = result.layout
    payload = meta_block(cfg)
    payload.update({
        "command": "fit",
        "converged": result.converged,
        "loglik": result.loglik,
        "aic": result.aic,
        "n_params": result.n_params,
        "iterations": result.iterations,
        "clamp_events": result.clamp_events,
        "hessian_condition": result.hessian_condition,
        "estimates": result.estimates,
        "se": result.se,
        "messages": list(result.messages),
        "layout": {"p": layout.p, "q": layout.q, "r": layout.r, "K": layout.K,
                   "knots": list(layout.knots), "alpha_shared": layout.alpha_shared},
        "correlation": correlation_to_config(result.params_hat.corr),
        "design": {"fixed": list(design.fixed), "random": list(design.random),
                   "survival": list(design.survival)},
        "cov_free": None if result.cov_free is None else result.cov_free.tolist(),
    })
    return payload


def params_from_report(report: Mapping):
    """Rebuild (ModelParams, ParamLayout, cov_free, DesignInfo) from a report."""
    lay = report["layout"]
    corr = correlation_from_config(report["correlation"])
    est = report["estimates"]
    p, q, r, K = lay["p"], lay["q"], lay["r"], lay["K"]
    layout = ParamLayout(p=p, q=q, r=r, K=K, knots=tuple(lay["knots"]), corr=corr,
                         alpha_shared=bool(lay["alpha_shared"]))
    D = np.empty((r, r))
    for i in range(r):
        for j in range(i + 1):
            D[i, j] = D[j, i] = est[f"D_{i + 1}{j + 1}"]
    alpha = (np.full(r, est["alpha"]) if layout.alpha_shared
             else np.array([est[f"alpha_{j + 1}"] for j in range(r)]))
    params = ModelParams.make(
        beta1=[est[f"beta1_{j}"] for j in range(p)],
        beta2=[est[f"beta2_{j + 1}"] for j in range(q)],
        sigma=est["sigma"],
        D=D, alpha=alpha,
        lam=[est[f"lambda_{k + 1}"] for k in range(K)],
        knots=np.asarray(lay["knots"], dtype=float),
        corr=corr)
    cov = report.get("cov_free")
    cov_free = None if cov is None else np.asarray(cov, dtype=float)
    design = design_from_config(report["design"])
    return params, layout, cov_free, design
