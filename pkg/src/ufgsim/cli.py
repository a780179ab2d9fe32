"""Command-line front end: system files, condition checks, simulation, reports.

Exit codes: 0 all verdicts pass, 2 a check reported violated, 3 usage or
parse error, 4 numeric failure (blow-up, Newton divergence, evaluation
domain error).  JSON reports carry schema_version 1 and echo every resolved
setting (including defaults) under "metadata" for provenance.  All commands
are deterministic given their flags and seed; `--threads` caps the worker
count used by ensemble internals and never changes results (the kernels are
vectorized and path substreams are fixed by the seed alone); it is therefore
deliberately left out of report metadata so reports stay byte-comparable
across thread settings.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import catalog, diagnostics, expr as ex, geometry, malliavin
from .dynamics import (
    FlowConfig,
    SDESystem,
    auxiliary_process,
    rank_along_path,
    simulate_paths,
)
from .fields import VectorField, build_hierarchy
from .geometry import NewtonConfig, SamplePlan
from .malliavin import block_check_ensemble, malliavin_matrix, simulate_variational

SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_VIOLATED = 2
EXIT_USAGE = 3
EXIT_NUMERIC = 4


class UsageError(Exception):
    pass


class SystemFileError(UsageError):
    pass


# ---------------------------------------------------------------------------
# Parsing helpers
# ---------------------------------------------------------------------------

def parse_point(text):
    try:
        return np.array([float(v) for v in text.split(",")], dtype=float)
    except ValueError:
        raise UsageError(f"bad point spec '{text}' (want comma-separated reals)") from None


def parse_box(text):
    axes = []
    for part in text.split(","):
        bits = part.split(":")
        if len(bits) != 2:
            raise UsageError(f"bad box axis '{part}' (want lo:hi)")
        try:
            lo, hi = float(bits[0]), float(bits[1])
        except ValueError:
            raise UsageError(f"bad box axis '{part}'") from None
        axes.append((lo, hi))
    return tuple(axes)


def parse_param_list(pairs):
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise UsageError(f"bad --param '{pair}' (want name=value)")
        key, val = pair.split("=", 1)
        try:
            out[key.strip()] = float(val)
        except ValueError:
            out[key.strip()] = val.strip()
    return out


def parse_reference_spec(text):
    """Per-coordinate reference list: 'gaussian:mu,var;dirac:a;none'."""
    refs = {}
    for i, part in enumerate(text.split(";")):
        part = part.strip()
        if not part or part == "none":
            continue
        if ":" in part:
            kind, argtext = part.split(":", 1)
            args = [float(v) for v in argtext.split(",") if v]
        else:
            kind, args = part, []
        kind = kind.strip()
        if kind == "gaussian":
            if len(args) != 2:
                raise UsageError("gaussian reference wants mu,var")
            refs[i] = diagnostics.gaussian(args[0], args[1])
        elif kind == "dirac":
            if len(args) != 1:
                raise UsageError("dirac reference wants a location")
            refs[i] = diagnostics.dirac(args[0])
        else:
            raise UsageError(f"unknown reference kind '{kind}'")
    if not refs:
        raise UsageError("reference spec selected no coordinate")
    return refs


def parse_system_file(path):
    """Read the plain-text system format; errors carry line numbers."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as err:
        raise SystemFileError(f"cannot read '{path}': {err}") from None
    dim = noise = None
    variables = None
    vfields = {}
    params = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise SystemFileError(f"{path}:{lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key == "dim":
            dim = int(val)
        elif key == "noise":
            noise = int(val)
        elif key == "vars":
            variables = tuple(v.strip() for v in val.split(","))
        elif key.startswith("param "):
            params[key[6:].strip()] = float(val)
        elif key.startswith("V") and key[1:].isdigit():
            if not (val.startswith("[") and val.endswith("]")):
                raise SystemFileError(f"{path}:{lineno}: field {key} must be [expr, ...]")
            vfields[int(key[1:])] = (lineno, [s for s in val[1:-1].split(",")])
        else:
            raise SystemFileError(f"{path}:{lineno}: unknown key '{key}'")
    if dim is None or noise is None or variables is None:
        raise SystemFileError(f"{path}: need dim, noise and vars lines")
    if len(variables) != dim:
        raise SystemFileError(f"{path}: {len(variables)} variable names for dim {dim}")
    fields = []
    for j in range(noise + 1):
        if j not in vfields:
            raise SystemFileError(f"{path}: missing field V{j}")
        lineno, texts = vfields[j]
        if len(texts) != dim:
            raise SystemFileError(
                f"{path}:{lineno}: field V{j} has {len(texts)} components, expected {dim}"
            )
        comps = []
        for text in texts:
            try:
                comps.append(ex.parse_expression(text, list(variables)))
            except ex.ParseError as err:
                raise SystemFileError(f"{path}:{lineno}: in V{j}: {err}") from None
        fields.append(VectorField(dim, tuple(comps), f"V{j}"))
    name = os.path.splitext(os.path.basename(path))[0]
    system = SDESystem(dim, fields[0], tuple(fields[1:]), name, params)
    return system, variables


def load_system(spec, params):
    """Resolve --system: a catalog name or a system-file path."""
    if spec in catalog.list_entries():
        entry = catalog.get(spec, params)
        return entry.system, entry, entry.variables
    if os.path.exists(spec):
        if params:
            raise UsageError("--param applies to catalog systems only")
        system, variables = parse_system_file(spec)
        return system, None, variables
    raise UsageError(
        f"unknown system '{spec}': not a catalog name ({', '.join(catalog.list_entries())}) "
        "and not a file"
    )


def emit(payload, out):
    text = json.dumps(payload, indent=2, sort_keys=True, allow_nan=True) + "\n"
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)


def write_text(text, out):
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)


def report_payload(command, system_name, params, metadata, **body):
    payload = {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "system": system_name,
        "params": params,
        "metadata": metadata,
    }
    payload.update(body)
    return payload


def _v0perp_for(entry, system, level, rtol):
    if entry is not None and entry.v0perp is not None:
        return entry.v0perp
    table = build_hierarchy(system.all_fields(), level)
    return geometry.drift_orthogonal_field(table, rtol=rtol)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_catalog(args):
    if args.action == "list":
        for name in catalog.list_entries():
            print(name)
        return EXIT_OK
    if not args.name:
        raise UsageError("catalog show needs --name")
    entry = catalog.get(args.name, parse_param_list(args.param))
    if args.export:
        write_text(entry.export_system_file(), args.export)
        return EXIT_OK
    payload = report_payload(
        "catalog show", entry.name, entry.params,
        {"level": entry.level, "variables": list(entry.variables)},
        fields={
            f"V{j}": [ex.to_string(c, list(entry.variables)) for c in f.components]
            for j, f in enumerate(entry.system.all_fields())
        },
        known_brackets=[
            {"index": list(e), "note": note} for e, _, note in entry.known_brackets
        ],
        sample_box=[list(b) for b in entry.sample_box],
    )
    emit(payload, args.out)
    return EXIT_OK


def _plan_from_args(args, entry):
    if getattr(args, "points", None):
        pts = np.loadtxt(args.points, delimiter=",", ndmin=2)
        return SamplePlan(points=pts)
    if args.box:
        return SamplePlan(box=parse_box(args.box), grid=args.grid)
    if entry is not None:
        return SamplePlan(box=entry.sample_box, grid=args.grid)
    raise UsageError("need --box (or --points where supported) for a non-catalog system")


def cmd_check(args):
    params = parse_param_list(args.param)
    system, entry, variables = load_system(args.system, params)
    level = args.level if args.level is not None else (entry.level if entry else 1)
    metadata = {
        "seed": None, "dt": None, "grid": args.grid, "rtol": args.rtol,
        "tol": args.tol, "level": level, "lambda0": args.lambda0,
        "residual_tol": args.residual_tol, "coeff_threshold": args.coeff_threshold,
        "lambda0_sweep": "off",
    }

    if args.condition == "kalman":
        if entry is None or entry.name != "linear":
            raise UsageError("the kalman check applies to the 'linear' catalog system")
        A = entry.facts["A"]
        Q = np.asarray(entry.facts["C"], dtype=float).T
        ok, rank = geometry.check_kalman(A, Q, rtol=args.rtol)
        payload = report_payload("check kalman", system.name, params, metadata,
                                 verdict="satisfied" if ok else "violated",
                                 rank=int(rank), records=[], worst_point=None)
        emit(payload, args.out)
        return EXIT_OK if ok else EXIT_VIOLATED

    if args.condition == "lyapunov":
        if not args.phi:
            raise UsageError("lyapunov check needs --phi")
        plan = _plan_from_args(args, entry)
        phi = ex.parse_expression(args.phi, list(variables))
        times = [float(t) for t in args.times.split(",")] if args.times else [0.0, 1.0, 10.0]
        rep = geometry.check_lyapunov(system, phi, plan, args.c1, args.c2, times)
    else:
        table = build_hierarchy(system.all_fields(), level)
        plan = _plan_from_args(args, entry)
        if args.condition == "ufg":
            rep = geometry.check_ufg(table, plan, residual_tol=args.residual_tol,
                                     coeff_blowup_threshold=args.coeff_threshold,
                                     rtol=args.rtol)
        elif args.condition in ("hc", "phc"):
            rep = geometry.check_hormander(table, plan, args.condition.upper(), rtol=args.rtol)
        elif args.condition == "oac":
            rep = geometry.check_oac(table, plan, args.lambda0, tol=args.tol)
        elif args.condition == "oac2":
            rep = geometry.check_oac2(table, plan, args.lambda0, tol=args.tol)
        else:
            raise UsageError(f"unknown condition '{args.condition}'")

    body = rep.to_dict()
    payload = report_payload(f"check {args.condition}", system.name, params, metadata, **body)
    emit(payload, args.out)
    return EXIT_VIOLATED if rep.verdict == "violated" else EXIT_OK


def cmd_decompose(args):
    params = parse_param_list(args.param)
    system, entry, _ = load_system(args.system, params)
    level = args.level if args.level is not None else (entry.level if entry else 1)
    table = build_hierarchy(system.all_fields(), level)
    plan = _plan_from_args(args, entry)
    records = []
    for x in plan.sample(system.dim):
        v_par, v_perp, resid = geometry.decompose_drift(table, x, args.rtol)
        records.append({
            "point": [float(v) for v in x],
            "parallel": [float(v) for v in v_par],
            "orthogonal": [float(v) for v in v_perp],
            "residual": float(resid),
        })
    metadata = {"rtol": args.rtol, "level": level, "grid": args.grid,
                "seed": None, "dt": None}
    payload = report_payload("decompose", system.name, params, metadata,
                             verdict="ok", records=records, worst_point=None)
    emit(payload, args.out)
    return EXIT_OK


def cmd_chart(args):
    params = parse_param_list(args.param)
    system, entry, _ = load_system(args.system, params)
    level = args.level if args.level is not None else (entry.level if entry else 1)
    table = build_hierarchy(system.all_fields(), level)
    x0 = parse_point(args.x0)
    v0perp = entry.v0perp if entry is not None else None
    chart = geometry.build_chart(table, x0, args.eps, rtol=args.rtol,
                                 newton_cfg=NewtonConfig(tol=args.newton_tol),
                                 v0perp=v0perp)
    rng = np.random.default_rng(args.seed)
    samples = rng.uniform(-args.eps, args.eps, size=(args.samples, system.dim))
    verify = geometry.verify_chart_structure(chart, table, samples,
                                             fd_step=args.fd_step, tol=args.tol)
    T = rng.uniform(-args.eps, args.eps, size=(min(args.samples, 50), system.dim))
    roundtrip = float(np.max(np.abs(chart.inverse(chart.forward(T)) - T)))
    metadata = {"rtol": args.rtol, "level": level, "seed": args.seed,
                "dt": chart.flow_cfg.dt, "grid": None, "eps": args.eps,
                "newton_tol": args.newton_tol}
    payload = report_payload(
        "chart", system.name, params, metadata,
        verdict="ok" if verify["passed"] else "violated",
        chart={
            "center": [float(v) for v in chart.center],
            "n": chart.n,
            "basis": [list(a.entries) for a in chart.basis_indices],
            "uses_drift_orthogonal": chart.uses_drift_orthogonal,
            "radius": chart.radius,
        },
        verify=verify,
        newton_roundtrip_error=roundtrip,
    )
    emit(payload, args.out)
    return EXIT_OK if verify["passed"] else EXIT_VIOLATED


def _simulate_from_args(args, system, store_times=None):
    return simulate_paths(system, parse_point(args.x0), args.t, args.dt, args.paths,
                          args.seed, store_stride=args.stride, store_times=store_times)


def cmd_simulate(args):
    params = parse_param_list(args.param)
    system, _, _ = load_system(args.system, params)
    ens = _simulate_from_args(args, system)
    _write_ensemble_csv(ens, args.out)
    return EXIT_OK


def _write_ensemble_csv(ens, out):
    import io

    buf = io.StringIO()
    ens.write_csv(buf)
    write_text(buf.getvalue(), out)


def cmd_zproc(args):
    params = parse_param_list(args.param)
    system, entry, _ = load_system(args.system, params)
    ens = _simulate_from_args(args, system)
    level = args.level if args.level is not None else (entry.level if entry else 1)
    v0perp = _v0perp_for(entry, system, level, args.rtol)
    z = auxiliary_process(ens, v0perp, FlowConfig(dt=args.dt))
    _write_ensemble_csv(z, args.out)
    return EXIT_OK


def cmd_ranks(args):
    params = parse_param_list(args.param)
    system, entry, _ = load_system(args.system, params)
    level = args.level if args.level is not None else (entry.level if entry else 1)
    table = build_hierarchy(system.all_fields(), level)
    ens = _simulate_from_args(args, system)
    ranks = rank_along_path(ens.times, ens.states, table, rtol=args.rtol)
    lines = ["path_id,time,rank"]
    for p in range(ens.n_paths):
        for k, t in enumerate(ens.times):
            lines.append(f"{p},{float(t)!r},{int(ranks[p, k])}")
    write_text("\n".join(lines) + "\n", args.out)
    return EXIT_OK


def cmd_malliavin(args):
    params = parse_param_list(args.param)
    system, _, _ = load_system(args.system, params)
    vp = simulate_variational(system, parse_point(args.x0), args.t, args.dt,
                              args.seed, n_paths=args.paths)
    M = malliavin_matrix(vp, system)
    reports, agg = block_check_ensemble(M, args.split, cond_threshold=args.cond_threshold)
    metadata = {"seed": args.seed, "dt": args.dt, "grid": None, "rtol": None,
                "split": args.split, "cond_threshold": args.cond_threshold}
    ok = agg["block_ok_fraction"] == 1.0 and agg["invertible_fraction"] == 1.0
    payload = report_payload(
        "malliavin", system.name, params, metadata,
        verdict="ok" if ok else "violated",
        aggregate=agg,
        paths=[r.to_dict() for r in reports],
        matrix_shape=[int(s) for s in M.shape],
        blowups=int(vp.blown.sum()),
        aborted=int(vp.aborted.sum()),
    )
    emit(payload, args.out)
    return EXIT_OK if ok else EXIT_VIOLATED


def cmd_converge(args):
    params = parse_param_list(args.param)
    system, _, _ = load_system(args.system, params)
    times = [float(t) for t in args.times.split(",")]
    refs = parse_reference_spec(args.reference)
    rep = diagnostics.convergence_study(system, parse_point(args.x0), times, refs,
                                        args.paths, args.seed, args.escape_radius,
                                        dt=args.dt, ks_tolerance=args.ks_tolerance)
    payload = report_payload("converge", system.name, params,
                             {"seed": args.seed, "dt": args.dt, "grid": None,
                              "rtol": None},
                             **rep.to_dict())
    emit(payload, args.out)
    if args.csv:
        lines = ["time,coordinate,ks,escape_fraction"]
        for i, t in enumerate(rep.times):
            for c in sorted(rep.ks):
                lines.append(f"{t!r},{c},{rep.ks[c][i]!r},{rep.escape_fraction[i]!r}")
        write_text("\n".join(lines) + "\n", args.csv)
    return EXIT_OK


def cmd_fpresidual(args):
    params = parse_param_list(args.param)
    system, entry, variables = load_system(args.system, params)
    rho = ex.parse_expression(args.density, list(variables))
    bits = args.grid_spec.split(":")
    if len(bits) != 3:
        raise UsageError("grid spec must be lo:hi:count")
    lo, hi, count = float(bits[0]), float(bits[1]), int(bits[2])
    res = diagnostics.fokker_planck_residual(system, rho, np.linspace(lo, hi, count))
    payload = report_payload("fpresidual", system.name, params,
                             {"grid": count, "seed": None, "dt": None, "rtol": None},
                             verdict="ok",
                             **res.to_dict())
    emit(payload, args.out)
    return EXIT_OK


def cmd_derivative(args):
    params = parse_param_list(args.param)
    system, entry, variables = load_system(args.system, params)
    f = ex.parse_expression(args.f, list(variables))
    direction = _resolve_direction(args.direction, system, entry, variables)
    x0 = parse_point(args.x0)
    h = args.h if args.h is not None else 1e-3 * (1.0 + float(np.linalg.norm(x0)))
    est, err = diagnostics.semigroup_derivative(system, f, direction, x0, args.t,
                                                args.paths, h=h, seed=args.seed,
                                                dt=args.dt)
    payload = report_payload("derivative", system.name, params,
                             {"seed": args.seed, "dt": args.dt, "h": h, "grid": None,
                              "rtol": None},
                             verdict="ok", estimate=est, stderr=err)
    emit(payload, args.out)
    return EXIT_OK


def _resolve_direction(spec, system, entry, variables):
    fields_by_name = {f"V{j}": f for j, f in enumerate(system.all_fields())}
    if spec in fields_by_name:
        return fields_by_name[spec]
    if spec == "v0perp":
        if entry is not None and entry.v0perp is not None:
            return entry.v0perp
        raise UsageError("no closed-form drift-orthogonal field for this system")
    if spec.startswith("[") and spec.endswith("]"):
        comps = tuple(ex.parse_expression(s, list(variables)) for s in spec[1:-1].split(","))
        return VectorField(system.dim, comps, "direction")
    raise UsageError(f"bad --direction '{spec}' (want V0..Vd, v0perp or [expr,...])")


# ---------------------------------------------------------------------------
# Argument wiring
# ---------------------------------------------------------------------------

def _add_common(p, sim=False, geom=False):
    p.add_argument("--system", required=True, help="catalog name or system file")
    p.add_argument("--param", action="append", default=[], help="name=value (repeatable)")
    p.add_argument("--out", default="-", help="output file, or - for stdout")
    p.add_argument("--threads", type=int, default=1,
                   help="cap on worker threads (results never depend on it)")
    if sim:
        p.add_argument("--x0", required=True)
        p.add_argument("--t", type=float, required=True)
        p.add_argument("--dt", type=float, default=1e-3)
        p.add_argument("--paths", type=int, default=100)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--stride", type=int, default=1)
    if geom:
        p.add_argument("--level", type=int, default=None)
        p.add_argument("--rtol", type=float, default=1e-8)
        p.add_argument("--box", default=None)
        p.add_argument("--grid", type=int, default=32)


def build_parser():
    ap = argparse.ArgumentParser(prog="ufgsim",
                                 description="degenerate-diffusion geometry and simulation")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("catalog", help="list or show built-in systems")
    p.add_argument("action", choices=["list", "show"])
    p.add_argument("--name")
    p.add_argument("--param", action="append", default=[])
    p.add_argument("--export", default=None, help="write the system file format")
    p.add_argument("--out", default="-")
    p.set_defaults(fn=cmd_catalog)

    p = sub.add_parser("check", help="run a condition checker")
    _add_common(p, geom=True)
    p.add_argument("--condition", required=True,
                   choices=["ufg", "hc", "phc", "oac", "oac2", "kalman", "lyapunov"])
    p.add_argument("--lambda0", type=float, default=1e-3)
    p.add_argument("--tol", type=float, default=1e-9)
    p.add_argument("--residual-tol", dest="residual_tol", type=float, default=1e-8)
    p.add_argument("--coeff-threshold", dest="coeff_threshold", type=float, default=1e6)
    p.add_argument("--points", default=None, help="CSV file of sample points")
    p.add_argument("--phi", default=None, help="lyapunov test function")
    p.add_argument("--c1", type=float, default=1.0)
    p.add_argument("--c2", type=float, default=1.0)
    p.add_argument("--times", default=None, help="lyapunov evaluation times")
    p.set_defaults(fn=cmd_check)

    p = sub.add_parser("decompose", help="drift decomposition at sample points")
    _add_common(p, geom=True)
    p.add_argument("--points", default=None, help="CSV file of sample points")
    p.set_defaults(fn=cmd_decompose)

    p = sub.add_parser("chart", help="build and verify a local chart")
    _add_common(p, geom=True)
    p.add_argument("--x0", required=True)
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--samples", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--fd-step", dest="fd_step", type=float, default=1e-5)
    p.add_argument("--newton-tol", dest="newton_tol", type=float, default=1e-12)
    p.set_defaults(fn=cmd_chart)

    p = sub.add_parser("simulate", help="simulate an ensemble to CSV")
    _add_common(p, sim=True)
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("zproc", help="auxiliary process (transport-corrected paths)")
    _add_common(p, sim=True, geom=True)
    p.set_defaults(fn=cmd_zproc)

    p = sub.add_parser("ranks", help="distribution rank along simulated paths")
    _add_common(p, sim=True, geom=True)
    p.set_defaults(fn=cmd_ranks)

    p = sub.add_parser("malliavin", help="variational paths and covariance checks")
    _add_common(p, sim=True)
    p.add_argument("--split", type=int, required=True)
    p.add_argument("--cond-threshold", dest="cond_threshold", type=float, default=1e10)
    p.set_defaults(fn=cmd_malliavin)

    p = sub.add_parser("converge", help="KS / escape-fraction convergence study")
    _add_common(p)
    p.add_argument("--x0", required=True)
    p.add_argument("--times", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--paths", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dt", type=float, default=1e-3)
    p.add_argument("--escape-radius", dest="escape_radius", type=float, default=1e3)
    p.add_argument("--ks-tolerance", dest="ks_tolerance", type=float, default=0.05)
    p.add_argument("--csv", default=None, help="also write time,coordinate,ks,escape_fraction")
    p.set_defaults(fn=cmd_converge)

    p = sub.add_parser("fpresidual", help="stationary Fokker-Planck residual of a density")
    _add_common(p)
    p.add_argument("--density", required=True)
    p.add_argument("--grid", dest="grid_spec", required=True, help="lo:hi:count")
    p.set_defaults(fn=cmd_fpresidual)

    p = sub.add_parser("derivative", help="semigroup derivative along a field")
    _add_common(p)
    p.add_argument("--f", required=True)
    p.add_argument("--direction", required=True)
    p.add_argument("--x0", required=True)
    p.add_argument("--t", type=float, required=True)
    p.add_argument("--h", type=float, default=None)
    p.add_argument("--paths", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dt", type=float, default=1e-3)
    p.set_defaults(fn=cmd_derivative)

    return ap


# options whose values may legitimately start with "-" (negative coordinates,
# expressions); merged into --opt=value so argparse does not eat them
_DASH_VALUE_OPTS = {
    "--box", "--x0", "--times", "--reference", "--density", "--f",
    "--direction", "--grid", "--phi", "--h", "--c1", "--c2",
}


def _preprocess(argv):
    out = []
    i = 0
    while i < len(argv):
        tok = argv[i]
        if tok in _DASH_VALUE_OPTS and i + 1 < len(argv) and argv[i + 1].startswith("-") \
                and argv[i + 1] != "-":
            out.append(f"{tok}={argv[i + 1]}")
            i += 2
            continue
        out.append(tok)
        i += 1
    return out


def run(argv=None):
    ap = build_parser()
    if argv is None:
        argv = sys.argv[1:]
    argv = _preprocess(list(argv))
    try:
        args = ap.parse_args(argv)
    except SystemExit as err:
        return EXIT_USAGE if err.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args)
    except (UsageError, KeyError, ValueError, ex.ParseError) as err:
        print(json.dumps({"error": str(err), "schema_version": SCHEMA_VERSION}),
              file=sys.stderr)
        return EXIT_USAGE
    except (ex.EvalDomainError, RuntimeError, np.linalg.LinAlgError,
            ArithmeticError) as err:
        print(json.dumps({"error": str(err), "schema_version": SCHEMA_VERSION}),
              file=sys.stderr)
        return EXIT_NUMERIC


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
