"""Verification harness: manufactured solutions, error tables, EOC fits.

A manufactured problem starts from a chosen exact solution, derives the
extra source term that makes it solve the modified equation, runs the
discrete schemes against it and measures errors under mesh or time-step
refinement.  The nonlocal integral inside the source is not available in
closed form, so it is tabulated numerically per time value with a fixed
high-order quadrature that does not depend on the run's mesh.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .coeff import (CoefficientSet, Expr, Literal, _add, _mul, _sub,
                    differentiate, evaluate, parse, substitute)
from .fespace import (DofMap, FeFunction, elliptic_projection, error_H1_semi,
                      error_L2, interpolate, mass_norm, max_gradient, norm_L2)
from .mesh import Mesh, refine
from .schemes import (SchemeConfig, TimeStepRecord, run, step_backward_euler,
                      step_crank_nicolson)

logger = logging.getLogger(__name__)

#: Default exact profiles for manufactured problems: a decaying sine on
#: (-1, 1) and on the unit square, plus their initial shapes.
DEFAULT_PROFILES = {
    1: "exp(-t) * sin(pi*(x+1)/2)",
    2: "exp(-t) * sin(pi*x) * sin(pi*y)",
}

DEFAULT_INITIAL = {
    1: "sin(pi*(x+1)/2)",
    2: "sin(pi*x) * sin(pi*y)",
}

EXACT_THRESHOLD = 1e-10


class MmsError(ValueError):
    pass


class BoundaryViolationError(MmsError):
    pass


class _DomainQuadrature:
    """Fixed high-order quadrature over the whole domain, independent of
    any run mesh; accurate to roughly 1e-12 for smooth integrands."""

    def __init__(self, dim, bounds):
        nodes, weights = np.polynomial.legendre.leggauss(8 if dim == 1 else 4)
        if dim == 1:
            a, b = bounds
            edges = np.linspace(a, b, 65)
            half = 0.5 * np.diff(edges)
            mid = 0.5 * (edges[:-1] + edges[1:])
            self.coords = {"x": (mid[:, None] + half[:, None] * nodes).ravel()}
            self.weights = (half[:, None] * weights).ravel()
        else:
            x0, y0, x1, y1 = bounds
            xe = np.linspace(x0, x1, 33)
            ye = np.linspace(y0, y1, 33)
            hx = 0.5 * np.diff(xe)
            hy = 0.5 * np.diff(ye)
            gx = (0.5 * (xe[:-1] + xe[1:])[:, None] + hx[:, None] * nodes).ravel()
            gy = (0.5 * (ye[:-1] + ye[1:])[:, None] + hy[:, None] * nodes).ravel()
            wx = (hx[:, None] * weights).ravel()
            wy = (hy[:, None] * weights).ravel()
            X, Y = np.meshgrid(gx, gy)
            self.coords = {"x": X.ravel(), "y": Y.ravel()}
            self.weights = np.outer(wy, wx).ravel()

    def integrate(self, expr: Expr, t: float) -> float:
        vals = evaluate(expr, t=t, **self.coords)
        vals = np.broadcast_to(np.asarray(vals, dtype=float),
                               self.weights.shape)
        return float(np.sum(self.weights * vals))


class MmsForcing:
    """Extra source g(x, t) turning the chosen profile into an exact
    solution of the modified equation.

    The space-time part is symbolic; the squared-integral denominator of
    the nonlocal term is a scalar per time value, tabulated on demand
    and cached.
    """

    def __init__(self, g_sym: Expr, f_of_u: Expr, lam: float,
                 quad: _DomainQuadrature):
        self.g_sym = g_sym
        self.f_of_u = f_of_u
        self.lam = lam
        self.quad = quad
        self._integral_cache = {}

    def nonlocal_value(self, t: float) -> float:
        value = self._integral_cache.get(t)
        if value is None:
            value = self.quad.integrate(self.f_of_u, t)
            self._integral_cache[t] = value
        return value

    def __call__(self, coords: dict, t: float):
        ref = next(iter(coords.values()))
        g = np.broadcast_to(
            np.asarray(evaluate(self.g_sym, t=t, **coords), dtype=float),
            np.shape(ref))
        if self.lam == 0.0:
            return g
        fv = np.broadcast_to(
            np.asarray(evaluate(self.f_of_u, t=t, **coords), dtype=float),
            np.shape(ref))
        return g - (self.lam / self.nonlocal_value(t) ** 2) * fv


@dataclass(frozen=True, eq=False)
class MmsProblem:
    u_exact: Expr
    u0: Expr
    forcing: MmsForcing
    cs: CoefficientSet
    dim: int
    bounds: tuple


def _diffusion_term(u_exact: Expr, cs: CoefficientSet, dim: int) -> Expr:
    """div(k(u) grad u) expanded as k'(u)|grad u|^2 + k(u) laplace u."""
    k_of_u = substitute(cs.k, "u", u_exact)
    kp_of_u = substitute(cs.k_prime, "u", u_exact)
    names = ("x",) if dim == 1 else ("x", "y")
    grad_sq = None
    lap = None
    for name in names:
        d1 = differentiate(u_exact, name)
        d2 = differentiate(d1, name)
        term = _mul(d1, d1)
        grad_sq = term if grad_sq is None else _add(grad_sq, term)
        lap = d2 if lap is None else _add(lap, d2)
    return _add(_mul(kp_of_u, grad_sq), _mul(k_of_u, lap))


def _boundary_samples(dim, bounds, n=100):
    if dim == 1:
        a, b = bounds
        ts = np.linspace(0.0, 1.0, n // 2)
        xs = np.concatenate([np.full(ts.size, a), np.full(ts.size, b)])
        return {"x": xs}, np.concatenate([ts, ts])
    x0, y0, x1, y1 = bounds
    per_side = max(n // 4, 2)
    sx = np.linspace(x0, x1, per_side)
    sy = np.linspace(y0, y1, per_side)
    xs = np.concatenate([sx, sx, np.full(per_side, x0), np.full(per_side, x1)])
    ys = np.concatenate([np.full(per_side, y0), np.full(per_side, y1), sy, sy])
    ts = np.tile(np.linspace(0.0, 1.0, 4), xs.size // 4 + 1)[:xs.size]
    return {"x": xs, "y": ys}, ts


def build_mms(u_exact, cs: CoefficientSet, mesh: Mesh) -> MmsProblem:
    """Manufacture a problem with the given exact solution on the mesh's
    domain.

    The profile must vanish on the boundary (checked by sampling), and
    the assembled forcing must reproduce the equation residual at random
    space-time samples to 1e-8 (checked with freshly derived symbolic
    derivatives).
    """
    u_exact = parse(u_exact) if isinstance(u_exact, str) else u_exact
    dim = mesh.dim
    bounds = mesh.domain_bounds()

    coords_b, ts_b = _boundary_samples(dim, bounds)
    vals = np.zeros(ts_b.size)
    for i in range(ts_b.size):
        point = {k: v[i] for k, v in coords_b.items()}
        vals[i] = float(evaluate(u_exact, t=ts_b[i], **point))
    worst = float(np.abs(vals).max())
    if worst > 1e-12:
        raise BoundaryViolationError(
            f"exact profile does not vanish on the boundary: "
            f"max |u| = {worst:.3g} over {ts_b.size} samples")

    u_t = differentiate(u_exact, "t")
    g_sym = _sub(u_t, _diffusion_term(u_exact, cs, dim))
    f_of_u = substitute(cs.f, "u", u_exact)
    forcing = MmsForcing(g_sym, f_of_u, cs.lam, _DomainQuadrature(dim, bounds))
    problem = MmsProblem(
        u_exact=u_exact,
        u0=substitute(u_exact, "t", Literal(0.0)),
        forcing=forcing, cs=cs, dim=dim, bounds=bounds)

    _check_residual(problem)
    return problem


def _check_residual(p: MmsProblem, n: int = 100, seed: int = 1234) -> None:
    rng = np.random.default_rng(seed)
    if p.dim == 1:
        a, b = p.bounds
        coords = {"x": rng.uniform(a, b, n)}
    else:
        x0, y0, x1, y1 = p.bounds
        coords = {"x": rng.uniform(x0, x1, n), "y": rng.uniform(y0, y1, n)}
    ts = rng.uniform(0.0, 1.0, n)

    u_t = differentiate(p.u_exact, "t")
    diff = _diffusion_term(p.u_exact, p.cs, p.dim)
    worst = 0.0
    for i in range(n):
        point = {k: v[i] for k, v in coords.items()}
        t = float(ts[i])
        lhs = (float(evaluate(u_t, t=t, **point))
               - float(evaluate(diff, t=t, **point)))
        nonlocal_term = 0.0
        if p.cs.lam != 0.0:
            nonlocal_term = (p.cs.lam / p.forcing.nonlocal_value(t) ** 2
                             * float(evaluate(p.forcing.f_of_u, t=t, **point)))
        g = float(p.forcing({k: np.asarray([v[i]]) for k, v in coords.items()},
                            t)[0])
        worst = max(worst, abs(lhs - nonlocal_term - g))
    if worst > 1e-8:
        raise MmsError(f"manufactured forcing fails the residual check: "
                       f"max residual {worst:.3g} > 1e-8")


def default_mms(dim: int, cs: CoefficientSet, mesh: Mesh) -> MmsProblem:
    return build_mms(DEFAULT_PROFILES[dim], cs, mesh)


# ------------------------------------------------------------ error tables

@dataclass
class ErrorRow:
    level: int
    h: float
    tau: float
    l2: float
    h1_semi: float
    theta: float
    rho: float
    rho_grad: float


_COLUMNS = ("l2", "h1_semi", "theta", "rho", "rho_grad")


@dataclass
class ErrorReport:
    rows: list
    refined: str      # which parameter was halved, "h" or "tau"

    def eoc(self, column: str):
        """Per-pair observed order: log2 error ratio under exact halving.

        Entries are floats, the string ``"exact"`` when the errors sit at
        solver precision, or None when the parameter was not halved.
        """
        if column not in _COLUMNS:
            raise KeyError(f"unknown error column {column!r}")
        out = []
        for prev, cur in zip(self.rows, self.rows[1:]):
            p0 = getattr(prev, self.refined)
            p1 = getattr(cur, self.refined)
            if not np.isclose(p0, 2.0 * p1, rtol=1e-9, atol=0.0):
                out.append(None)
                continue
            e0 = getattr(prev, column)
            e1 = getattr(cur, column)
            if min(e0, e1) < EXACT_THRESHOLD:
                out.append("exact")
                continue
            out.append(float(np.log2(e0 / e1)))
        return out


def measure_errors(state: FeFunction, mms: MmsProblem, t: float) -> dict:
    """All error columns of one run: true errors plus the split into the
    distance to the elliptic projection (theta) and its defect (rho)."""
    dm = state.dofmap
    proj = elliptic_projection(dm, mms.cs.k, mms.u_exact, t)
    return {
        "l2": error_L2(state, mms.u_exact, t),
        "h1_semi": error_H1_semi(state, mms.u_exact, t),
        "theta": norm_L2(state - proj),
        "rho": error_L2(proj, mms.u_exact, t),
        "rho_grad": error_H1_semi(proj, mms.u_exact, t),
    }


def error_split(records: list[TimeStepRecord], mms: MmsProblem,
                t: float) -> dict:
    return measure_errors(records[-1].state, mms, t)


def _study_rows(jobs, workers):
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda j: j(), jobs))
    return [j() for j in jobs]


def spatial_eoc_study(mms: MmsProblem, cfg: SchemeConfig, base_mesh: Mesh,
                      levels: int, tau: float | None = None,
                      workers: int = 1) -> ErrorReport:
    """Errors under mesh halving at a fixed small time step.

    When ``tau`` is omitted it defaults to the square of the finest mesh
    size, which keeps the time error subdominant for both first and
    second order schemes.
    """
    if levels < 3:
        raise ValueError("need at least 3 levels")
    meshes = [base_mesh]
    for _ in range(levels - 1):
        meshes.append(refine(meshes[-1]))
    if tau is None:
        tau = meshes[-1].h ** 2

    def job(level, mesh):
        def work():
            cfg_l = replace(cfg, tau=tau)
            records = run(mms.u0, cfg_l, mms.cs, mesh, mms)
            cols = measure_errors(records[-1].state, mms, cfg.t_end)
            return ErrorRow(level=level, h=mesh.h, tau=tau, **cols)
        return work

    rows = _study_rows([job(i, m) for i, m in enumerate(meshes)], workers)
    return ErrorReport(rows=rows, refined="h")


def temporal_eoc_study(mms: MmsProblem, cfg: SchemeConfig, mesh: Mesh,
                       levels: int, workers: int = 1) -> ErrorReport:
    """Errors under time-step halving on one fixed mesh, starting from
    the configured tau; the mesh must be fine enough that the spatial
    error stays subdominant."""
    if levels < 3:
        raise ValueError("need at least 3 levels")

    def job(level):
        def work():
            cfg_l = replace(cfg, tau=cfg.tau / 2 ** level)
            records = run(mms.u0, cfg_l, mms.cs, mesh, mms)
            cols = measure_errors(records[-1].state, mms, cfg.t_end)
            return ErrorRow(level=level, h=mesh.h, tau=cfg_l.tau, **cols)
        return work

    rows = _study_rows([job(i) for i in range(levels)], workers)
    return ErrorReport(rows=rows, refined="tau")


# ------------------------------------------------------------- diagnostics

def uniqueness_probe(u0: Expr, cfg: SchemeConfig, cs: CoefficientSet,
                     mesh: Mesh, steps: int = 10, perturbation: float = 0.1,
                     seed: int = 0) -> list[float]:
    """Rerun each implicit step from a perturbed inner starting guess and
    report the L2 distance between the two accepted states.

    Small distances back the uniqueness of the discrete solution for
    small tau/h; the probe is meaningless for the linearized scheme,
    which has no inner iteration.
    """
    if cfg.scheme == "linearized":
        raise ValueError("the linearized scheme has no inner iteration "
                         "to probe")
    stepper = (step_crank_nicolson if cfg.scheme == "crank_nicolson"
               else step_backward_euler)
    rng = np.random.default_rng(seed)
    dm = DofMap(mesh)
    state = interpolate(dm, u0, t=0.0)
    gaps = []
    for n in range(1, steps + 1):
        rec_a = stepper(state, n, cfg, cs, initial_guess=state)
        noisy = FeFunction(
            dm, state.coeffs + perturbation * rng.standard_normal(dm.n_dofs))
        rec_b = stepper(state, n, cfg, cs, initial_guess=noisy)
        gaps.append(mass_norm(dm, rec_a.state.coeffs - rec_b.state.coeffs))
        state = rec_a.state
    return gaps


def projection_gradient_levels(mms: MmsProblem, base_mesh: Mesh, levels: int,
                               t: float) -> list[float]:
    """Max pointwise gradient of the elliptic projection per refinement
    level; boundedness across levels backs the gradient stability of the
    projection."""
    out = []
    mesh = base_mesh
    for _ in range(levels):
        dm = DofMap(mesh)
        proj = elliptic_projection(dm, mms.cs.k, mms.u_exact, t)
        out.append(max_gradient(proj))
        mesh = refine(mesh)
    return out
