"""Batch command-line front door.

Subcommands: estimate | att | constant | simulate | diagnose. Input files
are comma-separated text with a header row (study: y,z,x1..xd; resistant:
y,x1..xd). Reports are line-delimited JSON records with a stable field
order plus a flat plot-ready CSV; every report embeds the fully resolved
configuration so the run can be repeated exactly.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 estimation
failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import asdict, dataclass, field
from itertools import product
from typing import Optional

import numpy as np

from . import att as att_mod
from . import simlab
from .errors import ConfigError, ParseError, SchemaError, TwoPointError
from .estimate import PointFailure, TwoPointFit, estimate_grid, prepare_residual_caches
from .inference import CiPair, infer_grid
from .kernels import BandwidthSet, KernelSpec, _FAMILIES
from .smoothers import (
    Dataset,
    ResistantSample,
    select_bandwidths,
    undersmooth_bandwidths,
)

SCHEMA_VERSION = 1

_DEFAULTS = {
    "kernel": "epanechnikov",
    "bandwidth_mode": "cv",
    "bandwidths": None,  # [h1, h2, h3, h4, h5] when bandwidth_mode == "fixed"
    "gamma": 1.1,
    "pi_clip": 0.05,
    "delta_exponent": 1.0 / 3.0,
    "alpha_level": 0.05,
    "resistant_mode": "heteroscedastic",
    "grid": None,
    "seed": 0,
}


@dataclass
class RunConfig:
    """Fully resolved run configuration (flags > file > defaults)."""

    kernel: str = "epanechnikov"
    bandwidth_mode: str = "cv"
    bandwidths: Optional[list] = None
    gamma: float = 1.1
    pi_clip: float = 0.05
    delta_exponent: float = 1.0 / 3.0
    alpha_level: float = 0.05
    resistant_mode: str = "heteroscedastic"
    grid: Optional[dict] = None
    seed: int = 0

    def echo(self) -> dict:
        return asdict(self)


def _validate_config(cfg: RunConfig) -> RunConfig:
    if cfg.kernel not in _FAMILIES:
        raise ConfigError("kernel", f"unknown family {cfg.kernel!r}")
    if cfg.bandwidth_mode not in ("cv", "fixed"):
        raise ConfigError("bandwidth_mode", "must be 'cv' or 'fixed'")
    if cfg.bandwidth_mode == "fixed":
        if cfg.bandwidths is None or len(cfg.bandwidths) != 5:
            raise ConfigError("bandwidths", "fixed mode needs 5 values h1..h5")
        if any(not (float(h) > 0) for h in cfg.bandwidths):
            raise ConfigError("bandwidths", "bandwidths must be positive")
    if not cfg.gamma > 1.0:
        raise ConfigError("gamma", "must exceed 1")
    if not (0.0 < cfg.pi_clip < 0.5):
        raise ConfigError("pi_clip", "must lie in (0, 0.5)")
    if not (0.0 < cfg.delta_exponent < 1.0):
        raise ConfigError("delta_exponent", "must lie in (0, 1)")
    if not (0.0 < cfg.alpha_level < 1.0):
        raise ConfigError("alpha_level", "must lie in (0, 1)")
    if cfg.resistant_mode not in ("homoscedastic", "heteroscedastic"):
        raise ConfigError("resistant_mode", "must be homoscedastic or heteroscedastic")
    if cfg.grid is not None:
        if not isinstance(cfg.grid, dict) or not ({"linspace", "points"} & set(cfg.grid)):
            raise ConfigError("grid", "needs a 'linspace' or 'points' entry")
        unknown = set(cfg.grid) - {"linspace", "points"}
        if unknown:
            raise ConfigError("grid", f"unknown entries {sorted(unknown)}")
    try:
        int(cfg.seed)
    except (TypeError, ValueError):
        raise ConfigError("seed", "must be an integer") from None
    return cfg


def resolve_config(path: Optional[str], overrides: Optional[dict] = None) -> RunConfig:
    """Merge defaults, an optional JSON config file, and flag overrides."""
    merged = dict(_DEFAULTS)
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                loaded = json.load(fh)
        except OSError as exc:
            raise ConfigError("config", f"cannot read {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"invalid JSON in {path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config", "top level must be an object")
        for key, value in loaded.items():
            if key not in _DEFAULTS:
                raise ConfigError(key, "unknown configuration key")
            merged[key] = value
    for key, value in (overrides or {}).items():
        if key not in _DEFAULTS:
            raise ConfigError(key, "unknown configuration key")
        if value is not None:
            merged[key] = value
    return _validate_config(RunConfig(**merged))


# ---------------------------------------------------------------------------
# Data ingestion


def _read_rows(path):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            return list(csv.reader(fh))
    except OSError as exc:
        raise ParseError(0, "", f"cannot read {path}: {exc}") from exc


def _check_columns(header, required_prefix):
    cols = [c.strip() for c in header]
    for i, name in enumerate(required_prefix):
        if i >= len(cols) or cols[i] != name:
            raise SchemaError(
                f"expected columns {required_prefix} then x1..xd, got {cols}"
            )
    xs = cols[len(required_prefix):]
    expected = [f"x{i + 1}" for i in range(len(xs))]
    if not xs or xs != expected:
        raise SchemaError(
            f"covariate columns must be x1..xd in order, got {xs or 'none'}"
        )
    return len(xs)


def _parse_cell(raw, row_no, col):
    try:
        v = float(raw)
    except ValueError:
        raise ParseError(row_no, col, f"not a number: {raw!r}") from None
    if not math.isfinite(v):
        raise ParseError(row_no, col, f"non-finite value {raw!r}")
    return v


def load_dataset(path) -> Dataset:
    """Parse a study file with columns y, z, x1..xd."""
    rows = _read_rows(path)
    if not rows:
        raise SchemaError("empty file")
    d = _check_columns(rows[0], ["y", "z"])
    names = ["y", "z"] + [f"x{i + 1}" for i in range(d)]
    y, z, x = [], [], []
    for r, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != d + 2:
            raise ParseError(r, "", f"expected {d + 2} fields, got {len(row)}")
        vals = [_parse_cell(c, r, names[i]) for i, c in enumerate(row)]
        if vals[1] not in (0.0, 1.0):
            raise SchemaError(f"row {r}: z must be 0 or 1, got {vals[1]}")
        y.append(vals[0])
        z.append(vals[1])
        x.append(vals[2:])
    try:
        return Dataset(np.array(y), np.array(z), np.array(x))
    except ValueError as exc:
        raise SchemaError(str(exc)) from exc


def load_resistant(path) -> ResistantSample:
    """Parse a resistant-sample file with columns y, x1..xd."""
    rows = _read_rows(path)
    if not rows:
        raise SchemaError("empty file")
    d = _check_columns(rows[0], ["y"])
    names = ["y"] + [f"x{i + 1}" for i in range(d)]
    y, x = [], []
    for r, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != d + 1:
            raise ParseError(r, "", f"expected {d + 1} fields, got {len(row)}")
        vals = [_parse_cell(c, r, names[i]) for i, c in enumerate(row)]
        y.append(vals[0])
        x.append(vals[1:])
    try:
        return ResistantSample(np.array(y), np.array(x))
    except ValueError as exc:
        raise SchemaError(str(exc)) from exc


def write_dataset(path, data: Dataset):
    """Serialize a study sample in the loadable column layout."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["y", "z"] + [f"x{i + 1}" for i in range(data.d)])
        for i in range(data.n):
            w.writerow(
                [repr(float(data.y[i])), int(data.z[i])]
                + [repr(float(v)) for v in data.x[i]]
            )


def write_resistant(path, sample: ResistantSample):
    """Serialize a resistant sample in the loadable column layout."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["y"] + [f"x{i + 1}" for i in range(sample.d)])
        for i in range(sample.m):
            w.writerow([repr(float(sample.y[i]))] + [repr(float(v)) for v in sample.x[i]])


# ---------------------------------------------------------------------------
# Grid handling


def parse_grid_flag(text: str) -> dict:
    """Parse a --grid flag: per-coordinate lo:hi:count segments joined by ','."""
    segments = [s.strip() for s in text.split(",") if s.strip()]
    spans = []
    for seg in segments:
        parts = seg.split(":")
        if len(parts) != 3:
            raise ConfigError("grid", f"segment {seg!r} is not lo:hi:count")
        try:
            lo, hi, cnt = float(parts[0]), float(parts[1]), int(parts[2])
        except ValueError:
            raise ConfigError("grid", f"segment {seg!r} is not lo:hi:count") from None
        if cnt < 1 or hi < lo:
            raise ConfigError("grid", f"bad span {seg!r}")
        spans.append([lo, hi, cnt])
    if not spans:
        raise ConfigError("grid", "empty grid flag")
    return {"linspace": spans}


def resolve_grid(cfg: RunConfig, data: Dataset) -> np.ndarray:
    """Materialize the evaluation grid (cartesian product of linspaces or an
    explicit point list); defaults to 50 points over the inner covariate
    range for univariate data."""
    spec = cfg.grid
    if spec is None:
        if data.d != 1:
            raise ConfigError("grid", f"a grid must be given for d={data.d}")
        lo, hi = np.quantile(data.x[:, 0], [0.02, 0.98])
        return np.linspace(lo, hi, 50)[:, None]
    if "points" in spec:
        pts = np.asarray(spec["points"], dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.shape[1] != data.d:
            raise ConfigError("grid", f"points have dimension {pts.shape[1]}, data {data.d}")
        return pts
    spans = spec["linspace"]
    if len(spans) != data.d:
        raise ConfigError("grid", f"{len(spans)} spans for d={data.d}")
    axes = [np.linspace(lo, hi, int(cnt)) for lo, hi, cnt in spans]
    return np.array(list(product(*axes)), dtype=float)


# ---------------------------------------------------------------------------
# Report emission


def _round_trip(value):
    return json.loads(json.dumps(value))


def point_record(index, fit, ci) -> dict:
    """Stable-order record for one grid point."""
    if isinstance(fit, PointFailure):
        return {
            "kind": "point",
            "index": index,
            "x": [float(v) for v in fit.x],
            "ok": False,
            "stage": fit.stage,
            "reason": fit.reason,
        }
    rec = {
        "kind": "point",
        "index": index,
        "x": [float(v) for v in fit.x],
        "ok": True,
        "beta_C": fit.beta_C,
        "beta_U": fit.beta_U,
        "s_hat": fit.s_hat,
        "delta2": fit.delta2,
        "tau_minus": fit.tau_minus,
        "tau_plus": fit.tau_plus,
        "boundary_flag": fit.boundary_flag,
        "moments": {
            "m_hat": fit.moments.m_hat,
            "sigma2_hat": fit.moments.sigma2_hat,
            "pi_hat": fit.moments.pi_hat,
            "sigma02_hat": fit.moments.sigma02_hat,
            "f_hat": fit.moments.f_hat,
        },
    }
    if isinstance(ci, CiPair):
        rec.update(
            {
                "regime": ci.regime,
                "ci_minus": [ci.ci_minus[0], ci.ci_minus[1]],
                "ci_plus": [ci.ci_plus[0], ci.ci_plus[1]],
                "v_delta": ci.v_delta,
                "v_tau_minus": ci.v_tau_minus,
                "v_tau_plus": ci.v_tau_plus,
                "v_beta_U": ci.v_beta_U,
                "v_delta_clamped": ci.v_delta_clamped,
            }
        )
    elif isinstance(ci, PointFailure):
        rec.update({"regime": None, "ci_stage": ci.stage, "ci_reason": ci.reason})
    return rec


def flat_row_from_record(rec: dict):
    """Plot-table row derived from a point record (None cells for gaps)."""
    row = [*rec["x"]]
    if rec.get("ok"):
        row += [rec["tau_minus"], rec["tau_plus"]]
        if rec.get("regime"):
            row += [
                rec["ci_minus"][0],
                rec["ci_minus"][1],
                rec["ci_plus"][0],
                rec["ci_plus"][1],
                rec["regime"],
            ]
        else:
            row += [None, None, None, None, None]
    else:
        row += [None] * 7
    return row


def write_report(out_prefix: str, header: dict, records: list):
    """Write the JSONL report and the flat CSV table, cross-checking that the
    flat rows are exact extractions of the records."""
    jsonl = f"{out_prefix}.jsonl"
    flat = f"{out_prefix}.csv"
    with open(jsonl, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for rec in records:
            fh.write(json.dumps(rec) + "\n")

    d = len(records[0]["x"]) if records else 0
    fields = [f"x{i + 1}" for i in range(d)] + [
        "tau_minus",
        "tau_plus",
        "ci_minus_lo",
        "ci_minus_hi",
        "ci_plus_lo",
        "ci_plus_hi",
        "regime",
    ]
    rows = [flat_row_from_record(rec) for rec in records if rec.get("kind") == "point"]
    for rec, row in zip([r for r in records if r.get("kind") == "point"], rows):
        if rec.get("ok") and rec.get("regime"):
            assert row[d] == rec["tau_minus"] and row[d + 4] == rec["ci_plus"][0]
    with open(flat, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(fields)
        for row in rows:
            w.writerow(["" if v is None else v for v in row])
    return jsonl, flat


def _make_header(command: str, cfg: RunConfig, **extra) -> dict:
    header = {
        "kind": "header",
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "config": _round_trip(cfg.echo()),
    }
    header.update(extra)
    return header


# ---------------------------------------------------------------------------
# Commands


def _resolve_bandwidths(cfg: RunConfig, data: Dataset, spec: KernelSpec) -> BandwidthSet:
    if cfg.bandwidth_mode == "fixed":
        h1, h2, h3, h4, h5 = (float(v) for v in cfg.bandwidths)
        return BandwidthSet(h1=h1, h2=h2, h3=h3, h4=h4, h5=h5, d=data.d)
    bw = select_bandwidths(data, spec)
    return undersmooth_bandwidths(bw, cfg.gamma)


def _bw_dict(bw: BandwidthSet) -> dict:
    return {
        "h1": bw.h1,
        "h2": bw.h2,
        "h3": bw.h3,
        "h4": bw.h4,
        "h5": bw.h5,
        "h_v": bw.h_v,
        "alpha2": bw.alpha2,
        "alpha3": bw.alpha3,
        "alpha4": bw.alpha4,
        "d": bw.d,
    }


def cmd_estimate(args) -> int:
    cfg = resolve_config(args.config, _config_overrides(args))
    data = load_dataset(args.study)
    resistant = load_resistant(args.resistant)
    if resistant.d != data.d:
        raise SchemaError(
            f"resistant sample has d={resistant.d}, study has d={data.d}"
        )
    spec = KernelSpec(cfg.kernel)
    bw = _resolve_bandwidths(cfg, data, spec)
    grid = resolve_grid(cfg, data)

    caches = prepare_residual_caches(data, bw, spec, points=grid, need_arm=True)
    fits = estimate_grid(
        data,
        resistant,
        grid,
        bw,
        spec,
        cfg.pi_clip,
        resistant_mode=cfg.resistant_mode,
        caches=caches,
    )
    cis = infer_grid(
        data,
        fits,
        bw,
        spec,
        caches,
        alpha_level=cfg.alpha_level,
        delta_exponent=cfg.delta_exponent,
        pi_clip=cfg.pi_clip,
    )
    records = [point_record(i, f, c) for i, (f, c) in enumerate(zip(fits, cis))]
    n_failed = sum(1 for r in records if not r["ok"])
    header = _make_header(
        "estimate",
        cfg,
        bandwidths=_bw_dict(bw),
        n=data.n,
        m=resistant.m,
        d=data.d,
        grid_size=int(grid.shape[0]),
        n_failed=n_failed,
    )
    jsonl, flat = write_report(args.out, header, records)
    print(f"wrote {jsonl} and {flat} ({len(records)} points, {n_failed} failed)")
    return 0


def cmd_att(args) -> int:
    cfg = resolve_config(args.config, _config_overrides(args))
    data = load_dataset(args.study)
    resistant = load_resistant(args.resistant)
    spec = KernelSpec(cfg.kernel)
    bw = _resolve_bandwidths(cfg, data, spec)

    est = att_mod.att_two_point(
        data, resistant, bw, spec, cfg.pi_clip, resistant_mode=cfg.resistant_mode
    )
    grids = [
        np.linspace(*np.quantile(data.x[:, j], [0.1, 0.9]), args.diag_points)
        for j in range(data.d)
    ]
    reports = att_mod.att_sign_diagnostic(
        data, resistant, bw, spec, grids, cfg.pi_clip, resistant_mode=cfg.resistant_mode
    )
    records = [
        {
            "kind": "att",
            "att_minus": est.att_minus,
            "att_plus": est.att_plus,
            "e_beta": est.e_beta,
            "e_abs_delta": est.e_abs_delta,
            "n_used": est.n_used,
        }
    ] + [
        {
            "kind": "sign_diagnostic",
            "coordinate": r.coordinate,
            "grid": [float(v) for v in r.grid],
            "mean_delta2": [None if not np.isfinite(v) else float(v) for v in r.mean_delta2],
            "minimum": None if not np.isfinite(r.minimum) else r.minimum,
            "passed": r.passed,
        }
        for r in reports
    ]
    header = _make_header(
        "att", cfg, bandwidths=_bw_dict(bw), n=data.n, m=resistant.m, d=data.d
    )
    out = f"{args.out}.jsonl"
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    print(f"wrote {out}: att_minus={est.att_minus:.4f} att_plus={est.att_plus:.4f}")
    return 0


def cmd_constant(args) -> int:
    cfg = resolve_config(args.config, _config_overrides(args))
    data = load_dataset(args.study)
    y_t = data.y[data.z == 1]
    y_c = data.y[data.z == 0]
    est = att_mod.constant_effect_estimate(y_t, y_c, args.sigma02)
    record = {
        "kind": "constant_effect",
        "tau_minus": est.tau_minus,
        "tau_plus": est.tau_plus,
        "clamped": est.clamped,
        "sigma02": args.sigma02,
        "var_sigma02": args.var_sigma02,
    }
    try:
        record["variance"] = att_mod.constant_effect_variance(
            y_t, y_c, args.sigma02, args.var_sigma02
        )
        record["variance_is_lower_bound"] = False
    except TwoPointError:
        record["variance"] = att_mod.two_sample_t_variance(y_t, y_c)
        record["variance_is_lower_bound"] = True
    header = _make_header("constant", cfg, n=data.n, d=data.d)
    out = f"{args.out}.jsonl"
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        fh.write(json.dumps(record) + "\n")
    print(
        f"wrote {out}: tau_minus={est.tau_minus:.4f} tau_plus={est.tau_plus:.4f}"
        + (" (clamped)" if est.clamped else "")
    )
    return 0


def cmd_diagnose(args) -> int:
    cfg = resolve_config(args.config, _config_overrides(args))
    data = load_dataset(args.study)
    resistant = load_resistant(args.resistant)
    spec = KernelSpec(cfg.kernel)
    bw = _resolve_bandwidths(cfg, data, spec)
    grids = [
        np.linspace(*np.quantile(data.x[:, j], [0.1, 0.9]), args.diag_points)
        for j in range(data.d)
    ]
    reports = att_mod.att_sign_diagnostic(
        data, resistant, bw, spec, grids, cfg.pi_clip, resistant_mode=cfg.resistant_mode
    )
    header = _make_header(
        "diagnose", cfg, bandwidths=_bw_dict(bw), n=data.n, m=resistant.m, d=data.d
    )
    out = f"{args.out}.jsonl"
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for r in reports:
            fh.write(
                json.dumps(
                    {
                        "kind": "sign_diagnostic",
                        "coordinate": r.coordinate,
                        "grid": [float(v) for v in r.grid],
                        "mean_delta2": [
                            None if not np.isfinite(v) else float(v) for v in r.mean_delta2
                        ],
                        "minimum": None if not np.isfinite(r.minimum) else r.minimum,
                        "passed": r.passed,
                    }
                )
                + "\n"
            )
    overall = all(r.passed for r in reports)
    print(f"wrote {out}: sign condition {'passed' if overall else 'FAILED'}")
    return 0


def cmd_simulate(args) -> int:
    cfg = resolve_config(args.config, _config_overrides(args))
    seed = int(cfg.seed if args.seed is None else args.seed)
    kernel = KernelSpec(cfg.kernel)

    if args.study_name == "mse":
        spec = simlab.DgpSpec(args.model, args.n, args.d, seed)
        result = simlab.run_mse_study(spec, args.reps, kernel=kernel)
    elif args.study_name == "rate":
        if not args.n_list:
            raise ConfigError("n_list", "rate study needs --n-list")
        spec = simlab.DgpSpec(args.model, max(args.n_list), args.d, seed)
        result = simlab.run_rate_study(spec, args.n_list, args.reps, kernel=kernel)
    elif args.study_name == "coverage":
        spec = simlab.DgpSpec(args.model, args.n, args.d, seed)
        if cfg.grid is None:
            raise ConfigError("grid", "coverage study needs a grid")
        grid = resolve_grid(cfg, _grid_probe(args.d))
        result = simlab.run_coverage_study(
            spec, args.reps, grid, cfg.alpha_level, kernel=kernel, gamma=cfg.gamma
        )
    elif args.study_name == "regime":
        result = simlab.run_regime_study(
            args.reps, args.n, model_id=args.model, d=args.d, seed=seed, kernel=kernel
        )
    else:  # pragma: no cover - argparse restricts choices
        raise ConfigError("study", f"unknown study {args.study_name!r}")

    header = _make_header(
        "simulate", cfg, study=args.study_name, meta=_round_trip_jsonable(result.meta)
    )
    out = f"{args.out}.jsonl"
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for rec in result.records:
            fh.write(json.dumps(_round_trip_jsonable(vars(rec))) + "\n")
        fh.write(
            json.dumps({"kind": "summary", **_round_trip_jsonable(result.summary)}) + "\n"
        )
    print(f"wrote {out}: {json.dumps(_round_trip_jsonable(result.summary))[:200]}")
    return 0


def _grid_probe(d: int):
    """Minimal stand-in with the right dimension for grid resolution."""

    class _P:
        pass

    p = _P()
    p.d = d
    p.x = np.zeros((1, d))
    return p


def _round_trip_jsonable(obj):
    def conv(v):
        if isinstance(v, (np.floating, np.integer)):
            return v.item()
        if isinstance(v, np.ndarray):
            return [conv(u) for u in v]
        if isinstance(v, dict):
            return {k: conv(u) for k, u in v.items()}
        if isinstance(v, (list, tuple)):
            return [conv(u) for u in v]
        if isinstance(v, float) and not math.isfinite(v):
            return None
        if isinstance(v, (bool, int, float, str)) or v is None:
            return v
        return str(v)

    return conv(obj)


# ---------------------------------------------------------------------------
# Argument parsing


def _config_overrides(args) -> dict:
    overrides = {
        "alpha_level": getattr(args, "alpha", None),
        "delta_exponent": getattr(args, "delta_exponent", None),
        "gamma": getattr(args, "gamma", None),
        "pi_clip": getattr(args, "pi_clip", None),
        "kernel": getattr(args, "kernel", None),
        "seed": getattr(args, "seed", None),
        "resistant_mode": getattr(args, "resistant_mode", None),
    }
    if getattr(args, "bandwidths", None):
        try:
            values = [float(v) for v in args.bandwidths.split(",")]
        except ValueError:
            raise ConfigError("bandwidths", "expected h1,h2,h3,h4,h5") from None
        overrides["bandwidths"] = values
        overrides["bandwidth_mode"] = "fixed"
    if getattr(args, "grid", None):
        overrides["grid"] = parse_grid_flag(args.grid)
    return {k: v for k, v in overrides.items() if v is not None}


def _add_common(p, *, needs_resistant=True):
    p.add_argument("--study", required=True, help="study sample file (y,z,x1..xd)")
    if needs_resistant:
        p.add_argument("--resistant", required=True, help="resistant sample file (y,x1..xd)")
    p.add_argument("--config", help="JSON configuration file")
    p.add_argument("--out", required=True, help="output path prefix")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--grid", help="per-coordinate lo:hi:count segments joined by ','")
    p.add_argument("--alpha", type=float, default=None, help="alpha level")
    p.add_argument("--delta-exponent", dest="delta_exponent", type=float, default=None)
    p.add_argument("--gamma", type=float, default=None, help="undersmoothing exponent")
    p.add_argument("--pi-clip", dest="pi_clip", type=float, default=None)
    p.add_argument("--kernel", choices=sorted(_FAMILIES), default=None)
    p.add_argument("--resistant-mode", dest="resistant_mode", default=None,
                   choices=["homoscedastic", "heteroscedastic"])
    p.add_argument("--bandwidths", help="fixed h1,h2,h3,h4,h5")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="twopoint",
        description="Two-point treatment-effect estimation calibrated by a resistant population's variance",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate", help="pointwise estimates and confidence intervals on a grid")
    _add_common(p)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("att", help="two-point ATT estimate with the sign diagnostic")
    _add_common(p)
    p.add_argument("--diag-points", type=int, default=5)
    p.set_defaults(func=cmd_att)

    p = sub.add_parser("constant", help="constant-effect closed forms from the two arms")
    _add_common(p, needs_resistant=False)
    p.add_argument("--sigma02", type=float, required=True,
                   help="resistant-population variance estimate")
    p.add_argument("--var-sigma02", dest="var_sigma02", type=float, default=0.0,
                   help="variance of the sigma02 estimate")
    p.set_defaults(func=cmd_constant)

    p = sub.add_parser("simulate", help="run a simulation study by name")
    p.add_argument("study_name", choices=["mse", "coverage", "rate", "regime"])
    p.add_argument("--model", required=True, choices=list(simlab.MODEL_IDS))
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--d", type=int, default=1)
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--n-list", dest="n_list", type=lambda s: [int(v) for v in s.split(",")],
                   default=None)
    p.add_argument("--config", help="JSON configuration file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--grid", help="per-coordinate lo:hi:count segments joined by ','")
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--kernel", choices=sorted(_FAMILIES), default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("diagnose", help="sign-condition diagnostic only")
    _add_common(p)
    p.add_argument("--diag-points", type=int, default=5)
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        _emit_error("config", exc)
        return 2
    except (ParseError, SchemaError) as exc:
        _emit_error("data", exc)
        return 3
    except TwoPointError as exc:
        _emit_error("estimation", exc)
        return 4


def _emit_error(category: str, exc: Exception):
    record = {
        "kind": "error",
        "category": category,
        "error": type(exc).__name__,
        "message": str(exc),
    }
    print(json.dumps(record), file=sys.stderr)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
