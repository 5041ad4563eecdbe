"""Batch driver: flat-file run configuration, execution, file outputs.

Configs are plain ``section.key = value`` lines (``#`` starts a
comment).  A run writes its artifacts into one output directory:
``errors.csv`` with the error table and observed orders, solution
snapshots (``u_<n>.csv`` in 1D, legacy ASCII VTK ``u_<n>.vtk`` in 2D),
``run.log`` with the hypothesis-validation report and any warnings, and
a ``MANIFEST`` listing every emitted file.  Exit codes: 0 success,
2 configuration error, 3 solver failure, 4 hypothesis violation.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .coeff import (HypothesisViolation, PRESETS, free_vars,
                    make_coefficients, parse as parse_expr,
                    validate_hypotheses)
from .fespace import DofMap, assemble_mass
from .mesh import make_interval_mesh, make_rect_mesh
from .schemes import SCHEMES, NonlinearOptions, SchemeConfig, run
from .sparse import SolverError
from .verify import (DEFAULT_INITIAL, ErrorReport, ErrorRow, build_mms,
                     measure_errors, spatial_eoc_study, temporal_eoc_study)

# fixed name so `python -m thermfem.cli` logs into the package hierarchy
logger = logging.getLogger("thermfem.cli")

MODES = ("solve", "spatial_eoc", "temporal_eoc")

_DEFAULTS = {
    "mesh.dim": 1,
    "mesh.bounds": None,          # dim dependent
    "mesh.n": [16],
    "scheme.type": "crank_nicolson",
    "scheme.tau": None,           # mode dependent
    "scheme.t_end": 0.5,
    "nonlinear.method": "fixed_point",
    "nonlinear.tolerance": 1e-10,
    "nonlinear.max_iters": 50,
    "nonlinear.damping": 1.0,
    "coefficients.preset": None,
    "coefficients.k": None,
    "coefficients.f": None,
    "coefficients.lambda": None,
    "coefficients.sigma": None,
    "coefficients.k1": None,
    "coefficients.k2": None,
    "initial.u0": None,
    "mms.u_exact": None,
    "eoc.levels": 4,
    "output.dir": "out",
    "output.snapshot_every": 0,
    "output.formats": "auto",
}


@dataclass
class RunConfig:
    """Fully validated run description; fields mirror the config keys."""

    mode: str
    dim: int
    bounds: tuple
    n: tuple
    scheme: str
    tau: float | None
    t_end: float
    nonlinear: NonlinearOptions
    coefficients: dict
    u0: str | None
    mms_u_exact: str | None
    levels: int
    output_dir: str
    snapshot_every: int
    formats: str


def _floats(value, count_options):
    parts = value.split()
    vals = [float(p) for p in parts]
    if len(vals) not in count_options:
        raise ValueError(f"expected {' or '.join(map(str, count_options))} "
                         f"numbers, got {len(vals)}")
    return vals


def _ints(value, count_options):
    parts = value.split()
    vals = [int(p) for p in parts]
    if len(vals) not in count_options:
        raise ValueError(f"expected {' or '.join(map(str, count_options))} "
                         f"integers, got {len(vals)}")
    return vals


def _check_expr(value, allowed, what):
    expr = parse_expr(value)
    extra = free_vars(expr) - set(allowed)
    if extra:
        raise ValueError(f"{what} may only use {sorted(allowed)}, "
                         f"found {sorted(extra)}")
    return value


def parse_config(text: str):
    """Parse and validate a config; returns (RunConfig or None, errors).

    Validation is not fail-fast: every detected problem is reported with
    its line number.
    """
    errors = []
    raw = {}
    lines_of = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            errors.append(f"line {lineno}: expected 'key = value'")
            continue
        key, _, value = stripped.partition("=")
        key = key.strip()
        value = value.strip()
        if key != "mode" and key not in _DEFAULTS:
            errors.append(f"line {lineno}: unknown key {key!r}")
            continue
        if key in raw:
            errors.append(f"line {lineno}: duplicate key {key!r}")
            continue
        raw[key] = value
        lines_of[key] = lineno

    def take(key, convert):
        if key not in raw:
            return _DEFAULTS.get(key)
        try:
            return convert(raw[key])
        except (ValueError, KeyError) as exc:
            errors.append(f"line {lines_of[key]}: {key}: {exc}")
            return _DEFAULTS.get(key)

    def choice(options):
        def conv(v):
            if v not in options:
                raise ValueError(f"must be one of {', '.join(options)}")
            return v
        return conv

    def positive_float(v):
        x = float(v)
        if x <= 0:
            raise ValueError("must be positive")
        return x

    mode = take("mode", choice(MODES))
    if "mode" not in raw:
        errors.append("line 0: missing required key 'mode'")

    def conv_dim(v):
        x = int(v)
        if x not in (1, 2):
            raise ValueError("must be 1 or 2")
        return x

    dim = take("mesh.dim", conv_dim)
    bounds = take("mesh.bounds", lambda v: _floats(v, (2, 4)))
    n = take("mesh.n", lambda v: _ints(v, (1, 2)))
    scheme = take("scheme.type", choice(SCHEMES))
    tau = take("scheme.tau", positive_float)
    t_end = take("scheme.t_end", positive_float)
    nl_method = take("nonlinear.method", choice(("fixed_point", "newton")))
    nl_tol = take("nonlinear.tolerance", positive_float)
    nl_iters = take("nonlinear.max_iters", lambda v: max(int(v), 0))
    nl_damping = take("nonlinear.damping", float)
    preset_name = take("coefficients.preset", choice(tuple(PRESETS)))
    k_src = take("coefficients.k", lambda v: _check_expr(v, {"u"}, "k"))
    f_src = take("coefficients.f", lambda v: _check_expr(v, {"u"}, "f"))

    def nonneg_lambda(v):
        x = float(v)
        if x < 0:
            raise ValueError("the source strength lambda must be positive")
        return x

    lam = take("coefficients.lambda", nonneg_lambda)
    sigma = take("coefficients.sigma", positive_float)
    k1 = take("coefficients.k1", positive_float)
    k2 = take("coefficients.k2", positive_float)
    space_vars = {"x", "t"} if dim == 1 else {"x", "y", "t"}
    u0 = take("initial.u0", lambda v: _check_expr(v, space_vars, "u0"))
    u_exact = take("mms.u_exact",
                   lambda v: _check_expr(v, space_vars, "u_exact"))
    levels = take("eoc.levels", lambda v: int(v))
    out_dir = take("output.dir", str)
    snap = take("output.snapshot_every", lambda v: max(int(v), 0))
    formats = take("output.formats", choice(("auto", "csv", "vtk")))

    # defaults that depend on other fields
    if bounds is None:
        bounds = [-1.0, 1.0] if dim == 1 else [0.0, 0.0, 1.0, 1.0]
    explicit = [k_src, f_src, lam, sigma, k1, k2]
    if preset_name is None and not any(v is not None for v in explicit):
        preset_name = "smooth"
    if preset_name is not None:
        base = dict(PRESETS[preset_name])
    else:
        base = {}
    coefficients = {
        "k": k_src if k_src is not None else base.get("k", "1"),
        "f": f_src if f_src is not None else base.get("f", "1"),
        "lam": lam if lam is not None else base.get("lam", 1.0),
        "sigma": sigma if sigma is not None else base.get("sigma", 1.0),
        "k1": k1 if k1 is not None else base.get("k1", 1.0),
        "k2": k2 if k2 is not None else base.get("k2", 1.0),
    }

    # cross-field checks
    if mode in ("spatial_eoc", "temporal_eoc") and u_exact is None:
        errors.append(f"line 0: mode {mode} requires mms.u_exact")
    if bounds is not None and dim == 1 and len(bounds) != 2:
        errors.append("line %d: mesh.bounds: 1D needs 'a b'"
                      % lines_of.get("mesh.bounds", 0))
    if bounds is not None and dim == 2 and len(bounds) != 4:
        errors.append("line %d: mesh.bounds: 2D needs 'x0 y0 x1 y1'"
                      % lines_of.get("mesh.bounds", 0))
    if scheme == "linearized":
        if dim != 1:
            errors.append("line %d: the linearized scheme requires mesh.dim=1"
                          % lines_of.get("scheme.type", 0))
        if coefficients["k"].strip() != "1":
            errors.append("line %d: the linearized scheme requires k = 1"
                          % lines_of.get("scheme.type", 0))
    if levels is not None and mode != "solve" and levels < 3:
        errors.append("line %d: eoc.levels must be at least 3"
                      % lines_of.get("eoc.levels", 0))
    if formats == "vtk" and dim == 1:
        errors.append("line %d: vtk snapshots are for 2D meshes; 1D "
                      "snapshots are csv" % lines_of.get("output.formats", 0))
    if nl_iters is not None and nl_iters < 1:
        errors.append("line %d: nonlinear.max_iters must be at least 1"
                      % lines_of.get("nonlinear.max_iters", 0))

    if errors:
        return None, errors

    try:
        nonlinear = NonlinearOptions(method=nl_method, tolerance=nl_tol,
                                     max_iters=nl_iters, damping=nl_damping)
    except ValueError as exc:
        return None, [f"line 0: nonlinear options: {exc}"]

    cfg = RunConfig(
        mode=mode, dim=dim, bounds=tuple(bounds),
        n=tuple(n) if len(n) > 1 else (n[0],) * (dim - 1) + (n[0],),
        scheme=scheme, tau=tau, t_end=t_end, nonlinear=nonlinear,
        coefficients=coefficients, u0=u0, mms_u_exact=u_exact,
        levels=levels, output_dir=out_dir, snapshot_every=snap,
        formats=formats)
    return cfg, []


# ----------------------------------------------------------------- outputs

def _fmt(x: float) -> str:
    return f"{x:.17g}"


def _write_errors_csv(path: Path, report: ErrorReport) -> None:
    eoc_l2 = report.eoc("l2")
    eoc_h1 = report.eoc("h1_semi")

    def entry(values, i):
        if i == 0:
            return ""
        v = values[i - 1]
        if v is None:
            return ""
        if isinstance(v, str):
            return v
        return _fmt(v)

    lines = ["level,h,tau,L2,H1semi,theta,rho,rho_grad,eoc_L2,eoc_H1"]
    for i, row in enumerate(report.rows):
        lines.append(",".join([
            str(row.level), _fmt(row.h), _fmt(row.tau), _fmt(row.l2),
            _fmt(row.h1_semi), _fmt(row.theta), _fmt(row.rho),
            _fmt(row.rho_grad), entry(eoc_l2, i), entry(eoc_h1, i)]))
    path.write_text("\n".join(lines) + "\n")


def _write_snapshot_csv(path: Path, mesh, values: np.ndarray) -> None:
    lines = [",".join(_fmt(c) for c in coords) + f",{_fmt(u)}"
             for coords, u in zip(mesh.vertices, values)]
    path.write_text("\n".join(lines) + "\n")


def _write_snapshot_vtk(path: Path, mesh, values: np.ndarray) -> None:
    out = ["# vtk DataFile Version 3.0", "solution snapshot", "ASCII",
           "DATASET UNSTRUCTURED_GRID",
           f"POINTS {mesh.n_vertices} double"]
    for x, y in mesh.vertices:
        out.append(f"{_fmt(x)} {_fmt(y)} 0")
    out.append(f"CELLS {mesh.n_elements} {4 * mesh.n_elements}")
    for a, b, c in mesh.elements:
        out.append(f"3 {a} {b} {c}")
    out.append(f"CELL_TYPES {mesh.n_elements}")
    out.extend(["5"] * mesh.n_elements)
    out.append(f"POINT_DATA {mesh.n_vertices}")
    out.append("SCALARS u double 1")
    out.append("LOOKUP_TABLE default")
    out.extend(_fmt(v) for v in values)
    path.write_text("\n".join(out) + "\n")


# ---------------------------------------------------------------- execute

def _build_mesh(cfg: RunConfig):
    if cfg.dim == 1:
        a, b = cfg.bounds
        return make_interval_mesh(a, b, cfg.n[-1])
    x0, y0, x1, y1 = cfg.bounds
    nx = cfg.n[0]
    ny = cfg.n[-1]
    return make_rect_mesh(x0, y0, x1, y1, nx, ny)


def execute(cfg: RunConfig, output_dir: str | None = None, threads: int = 1,
            log_level: str = "info") -> int:
    """Run one configuration; returns the process exit code.

    Partial outputs are kept on failure; the MANIFEST lists exactly the
    files that were completed.
    """
    out = Path(output_dir if output_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    pkg_logger = logging.getLogger("thermfem")
    old_level = pkg_logger.level
    handler = logging.FileHandler(out / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    pkg_logger.addHandler(handler)
    pkg_logger.setLevel(logging.DEBUG if log_level == "debug" else logging.INFO)

    try:
        code = _execute_inner(cfg, out, threads, log_level, written)
    except HypothesisViolation as exc:
        logger.error("hypothesis violation: %s", exc)
        code = 4
    except (SolverError, ValueError, ArithmeticError, RuntimeError) as exc:
        logger.error("solver failure: %s", exc)
        code = 3
    finally:
        handler.close()
        pkg_logger.removeHandler(handler)
        pkg_logger.setLevel(old_level)
        written.append("run.log")
        (out / "MANIFEST").write_text(
            "\n".join(sorted(written)) + "\n")
    return code


def _execute_inner(cfg: RunConfig, out: Path, threads: int, log_level: str,
                   written: list) -> int:
    c = cfg.coefficients
    cs = make_coefficients(c["k"], c["f"], c["lam"], c["sigma"],
                           c["k1"], c["k2"])
    report = validate_hypotheses(cs)
    for line in report.lines():
        logger.info("%s", line)

    mesh = _build_mesh(cfg)
    tau = cfg.tau
    if tau is None:
        if cfg.mode == "spatial_eoc":
            finest_h = mesh.h / 2 ** (cfg.levels - 1)
            tau = finest_h * finest_h
        else:
            tau = 0.01 if cfg.mode == "solve" else 0.1
    scheme_cfg = SchemeConfig(scheme=cfg.scheme, tau=tau, t_end=cfg.t_end,
                              nonlinear=cfg.nonlinear)

    mms = None
    if cfg.mms_u_exact is not None:
        mms = build_mms(cfg.mms_u_exact, cs, mesh)

    if log_level == "debug":
        with open(out / "mesh.txt", "w") as fh:
            mesh.dump_text(fh)
        written.append("mesh.txt")
        with open(out / "mass_matrix.txt", "w") as fh:
            assemble_mass(DofMap(mesh)).dump_coo(fh)
        written.append("mass_matrix.txt")

    if cfg.mode == "solve":
        u0 = cfg.u0
        if mms is not None:
            u0 = mms.u0
        elif u0 is None:
            u0 = DEFAULT_INITIAL[cfg.dim]
        records = run(parse_expr(u0) if isinstance(u0, str) else u0,
                      scheme_cfg, cs, mesh, mms)
        logger.info("completed %d steps to t = %g; nonlocal integral at "
                    "t_end = %.12g", len(records) - 1, records[-1].t,
                    records[-1].nonlocal_value)
        if cfg.snapshot_every > 0:
            use_vtk = cfg.formats == "vtk" or (cfg.formats == "auto"
                                               and cfg.dim == 2)
            for rec in records:
                if rec.n % cfg.snapshot_every != 0:
                    continue
                values = rec.state.vertex_values()
                if use_vtk:
                    name = f"u_{rec.n}.vtk"
                    _write_snapshot_vtk(out / name, mesh, values)
                else:
                    name = f"u_{rec.n}.csv"
                    _write_snapshot_csv(out / name, mesh, values)
                written.append(name)
        if mms is not None:
            cols = measure_errors(records[-1].state, mms, cfg.t_end)
            row = ErrorRow(level=0, h=mesh.h, tau=tau, **cols)
            _write_errors_csv(out / "errors.csv",
                              ErrorReport(rows=[row], refined="h"))
            written.append("errors.csv")
        return 0

    if cfg.mode == "spatial_eoc":
        report = spatial_eoc_study(mms, scheme_cfg, mesh, cfg.levels,
                                   tau=tau, workers=threads)
    else:
        report = temporal_eoc_study(mms, scheme_cfg, mesh, cfg.levels,
                                    workers=threads)
    _write_errors_csv(out / "errors.csv", report)
    written.append("errors.csv")
    for row, eoc in zip(report.rows[1:], report.eoc("l2")):
        logger.info("level %d: h = %.6g tau = %.6g L2 = %.6g eoc = %s",
                    row.level, row.h, row.tau, row.l2, eoc)
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="solver",
        description="Finite element solver and convergence studies for the "
                    "nonlocal heat problem")
    parser.add_argument("config", help="path to a key = value config file")
    parser.add_argument("--output-dir", default=None,
                        help="override output.dir from the config")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker threads for independent study levels")
    parser.add_argument("--log-level", choices=("info", "debug"),
                        default="info")
    args = parser.parse_args(argv)

    try:
        text = Path(args.config).read_text()
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return 2
    cfg, errors = parse_config(text)
    if errors:
        for err in errors:
            print(f"config error: {err}", file=sys.stderr)
        return 2
    return execute(cfg, output_dir=args.output_dir, threads=args.threads,
                   log_level=args.log_level)


if __name__ == "__main__":
    sys.exit(main())
