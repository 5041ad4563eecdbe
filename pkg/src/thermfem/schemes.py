"""Time integration of the spatially discretized nonlocal heat problem.

Three fully discrete schemes share the assembled mass and stiffness
operators: a fully implicit backward Euler step and a Crank-Nicolson
step, each closed by an inner fixed-point (coefficient-lagged) or
Newton iteration, and a linearized scheme that treats the diffusion
implicitly but the nonlocal source explicitly, needing a single
tridiagonal solve per step (constant unit diffusion, 1D only).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .coeff import CoefficientSet, Expr, Literal, evaluate
from .fespace import (DofMap, FeFunction, assemble_function_load, assemble_load,
                      assemble_mass, assemble_stiffness, assembly_rule,
                      interpolate, mass_norm, nonlocal_integral)
from .mesh import Mesh
from .sparse import (CsrMatrix, LinearSolveOptions, SingularPivotError,
                     _tridiagonal_bands, solve)

logger = logging.getLogger(__name__)


class NonlinearDivergenceError(RuntimeError):
    """The inner iteration hit its iteration cap before the residual
    tolerance."""


class UnsupportedCoefficientError(ValueError):
    pass


class UnsupportedDimensionError(ValueError):
    pass


@dataclass
class NonlinearOptions:
    """Inner solver controls; the tolerance is tested against the step
    residual relative to 1 + the L2 norm of the iterate."""

    method: str = "fixed_point"
    tolerance: float = 1e-10
    max_iters: int = 50
    damping: float = 1.0

    def __post_init__(self):
        if self.method not in ("fixed_point", "newton"):
            raise ValueError(f"unknown nonlinear method {self.method!r}")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if not (0.0 < self.damping <= 1.0):
            raise ValueError("damping must lie in (0, 1]")


SCHEMES = ("backward_euler", "crank_nicolson", "linearized")


@dataclass
class SchemeConfig:
    scheme: str = "backward_euler"
    tau: float = 0.01
    t_end: float = 0.5
    nonlinear: NonlinearOptions = field(default_factory=NonlinearOptions)

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if not (0 < self.tau <= self.t_end):
            raise ValueError("need 0 < tau <= t_end")


@dataclass
class TimeStepRecord:
    n: int
    t: float
    state: FeFunction
    nonlinear_iters: int
    nonlocal_value: float


def _combine(dm: DofMap, a: CsrMatrix, ca: float, b: CsrMatrix,
             cb: float) -> CsrMatrix:
    # both operators were assembled on dm's pattern, so data vectors align
    return CsrMatrix(dm.n_dofs, dm.indptr, dm.indices,
                     ca * a.data + cb * b.data, symmetric=True)


def _linear_solve_opts(dm: DofMap) -> LinearSolveOptions:
    method = "tridiagonal" if dm.mesh.dim == 1 else "conjugate_gradient"
    return LinearSolveOptions(method=method, rel_tolerance=1e-12)


def _forcing_vector(dm: DofMap, forcing, t: float) -> np.ndarray:
    if forcing is None:
        return np.zeros(dm.n_dofs)
    return assemble_function_load(dm, forcing, t)


# ------------------------------------------------------- Newton machinery

def _newton_jacobian_parts(dm: DofMap, cs: CoefficientSet, s_vec: np.ndarray):
    """Sparse Jacobian data of the stiffness and source terms at a state,
    plus the rank-one factors of the nonlocal derivative.

    Returns (jac_data, rank_u, rank_v) with the convention that the full
    Jacobian contribution is jac_data + outer(rank_u, rank_v).
    """
    rule = assembly_rule(dm.mesh.dim)
    _, wq, shapes = dm.quad_geometry(rule)
    full = np.zeros(dm.mesh.n_vertices)
    full[dm.interior_dofs] = s_vec
    vals_el = full[dm.mesh.elements]
    uq = np.einsum("ea,qa->eq", vals_el, shapes)

    kq = np.broadcast_to(np.asarray(evaluate(cs.k, u=uq), dtype=float), uq.shape)
    kpq = np.broadcast_to(np.asarray(evaluate(cs.k_prime, u=uq), dtype=float),
                          uq.shape)
    grad_u = np.einsum("ea,ead->ed", vals_el, dm.el_grads)

    # stiffness part (k(u) grad phi_b, grad phi_a)
    kbar = np.sum(wq * kq, axis=1)
    gdots = np.einsum("ead,ebd->eab", dm.el_grads, dm.el_grads)
    local = gdots * kbar[:, None, None]
    # coefficient sensitivity (k'(u) phi_b grad u, grad phi_a)
    dush = np.einsum("ed,ead->ea", grad_u, dm.el_grads)
    wkp = np.einsum("eq,qb->eb", wq * kpq, shapes)
    local = local + np.einsum("ea,eb->eab", dush, wkp)

    rank_u = np.zeros(dm.n_dofs)
    rank_v = np.zeros(dm.n_dofs)
    if cs.lam != 0.0:
        fq = np.broadcast_to(np.asarray(evaluate(cs.f, u=uq), dtype=float),
                             uq.shape)
        fpq = np.broadcast_to(
            np.asarray(evaluate(cs.f_prime, u=uq), dtype=float), uq.shape)
        integral = float(np.sum(wq * fq))
        # - lam/I^2 (f'(u) phi_b, phi_a)
        local = local - (cs.lam / integral ** 2) * np.einsum(
            "eq,qa,qb->eab", wq * fpq, shapes, shapes)
        m_vec = dm.vector_from_element_values(
            np.einsum("eq,qa->ea", wq * fq, shapes))
        w_vec = dm.vector_from_element_values(
            np.einsum("eq,qa->ea", wq * fpq, shapes))
        rank_u = (2.0 * cs.lam / integral ** 3) * m_vec
        rank_v = w_vec

    data = np.zeros(dm.nnz)
    kernels.scatter_add(data, dm._mat_slots,
                        np.ascontiguousarray(local.ravel()[dm._mat_valid]))
    return data, rank_u, rank_v


def _solve_rank_one(dm: DofMap, jac: CsrMatrix, u: np.ndarray, v: np.ndarray,
                    rhs: np.ndarray) -> np.ndarray:
    """Solve (jac + u v') x = rhs.

    1D Jacobians are tridiagonal, handled by Thomas elimination plus the
    rank-one update formula; 2D Newton falls back to a dense solve,
    which is acceptable because Newton is an optional alternative to the
    default fixed-point iteration.
    """
    if dm.mesh.dim == 1:
        sub, diag, sup = _tridiagonal_bands(jac)
        p, ok1 = kernels.thomas_solve(sub, diag, sup, rhs)
        if not np.any(u):
            if not ok1:
                raise SingularPivotError("tridiagonal pivot below 1e-300")
            return p
        q, ok2 = kernels.thomas_solve(sub, diag, sup, u)
        if not (ok1 and ok2):
            raise SingularPivotError("tridiagonal pivot below 1e-300")
        denom = 1.0 + float(np.dot(v, q))
        return p - q * (float(np.dot(v, p)) / denom)
    dense = jac.to_dense() + np.outer(u, v)
    return np.linalg.solve(dense, rhs)


# -------------------------------------------------------- implicit steps

def _implicit_step(prev: FeFunction, n: int, cfg: SchemeConfig,
                   cs: CoefficientSet, forcing, midpoint: bool,
                   initial_guess: FeFunction | None) -> TimeStepRecord:
    dm = prev.dofmap
    tau = cfg.tau
    nl = cfg.nonlinear
    mass = assemble_mass(dm)
    opts = _linear_solve_opts(dm)
    bounds = (cs.k1, cs.k2)

    t_new = n * tau
    t_force = t_new - 0.5 * tau if midpoint else t_new
    g_vec = _forcing_vector(dm, forcing, t_force)
    a_prev = mass.matvec(prev.coeffs)

    v = (initial_guess.coeffs if initial_guess is not None
         else prev.coeffs).copy()
    weight = 0.5 if midpoint else 1.0

    iters = 0
    while True:
        s_vec = 0.5 * (v + prev.coeffs) if midpoint else v
        s_fn = FeFunction(dm, s_vec)
        stiff = assemble_stiffness(dm, cs.k, s_fn, bounds=bounds)
        f_vec = assemble_load(dm, cs.f, s_fn, cs.lam)

        residual = (mass.matvec(v - prev.coeffs) / tau
                    + stiff.matvec(s_vec) - f_vec - g_vec)
        if (np.linalg.norm(residual)
                <= nl.tolerance * (1.0 + mass_norm(dm, v))):
            break
        if iters >= nl.max_iters:
            raise NonlinearDivergenceError(
                f"inner {nl.method} iteration did not reach tolerance "
                f"{nl.tolerance:g} within {nl.max_iters} iterations at "
                f"t = {t_new:g}")

        if nl.method == "fixed_point":
            system = _combine(dm, mass, 1.0, stiff, weight * tau)
            rhs = a_prev + tau * (f_vec + g_vec)
            if midpoint:
                rhs = rhs - (tau / 2.0) * stiff.matvec(prev.coeffs)
            v_next = solve(system, rhs, opts)
        else:
            jac_data, r_u, r_v = _newton_jacobian_parts(dm, cs, s_vec)
            data = mass.data / tau + weight * jac_data
            jac = CsrMatrix(dm.n_dofs, dm.indptr, dm.indices, data,
                            symmetric=False)
            delta = _solve_rank_one(dm, jac, weight * r_u, r_v, -residual)
            v_next = v + delta
        v = v + nl.damping * (v_next - v)
        iters += 1

    state = FeFunction(dm, v)
    return TimeStepRecord(n=n, t=t_new, state=state, nonlinear_iters=iters,
                          nonlocal_value=nonlocal_integral(dm, cs.f, state))


def step_backward_euler(prev: FeFunction, n: int, cfg: SchemeConfig,
                        cs: CoefficientSet, forcing=None,
                        initial_guess: FeFunction | None = None
                        ) -> TimeStepRecord:
    """One fully implicit step; all nonlinearities at the new time level.

    The returned state satisfies the discrete residual bound
    ||A (U - U_prev)/tau + B(U) U - source(U) - g|| <=
    tolerance * (1 + ||U||), with the extra load g evaluated at the new
    time.
    """
    return _implicit_step(prev, n, cfg, cs, forcing, midpoint=False,
                          initial_guess=initial_guess)


def step_crank_nicolson(prev: FeFunction, n: int, cfg: SchemeConfig,
                        cs: CoefficientSet, forcing=None,
                        initial_guess: FeFunction | None = None
                        ) -> TimeStepRecord:
    """One Crank-Nicolson step; coefficients, the nonlocal source and the
    extra load are evaluated at the midpoint state and time."""
    return _implicit_step(prev, n, cfg, cs, forcing, midpoint=True,
                          initial_guess=initial_guess)


# -------------------------------------------------------- linearized step

def _require_unit_k(cs: CoefficientSet) -> None:
    if not (isinstance(cs.k, Literal) and cs.k.value == 1.0
            and cs.k1 == 1.0 and cs.k2 == 1.0):
        raise UnsupportedCoefficientError(
            "the linearized scheme requires the constant diffusion k = 1")


def unit_stiffness(dm: DofMap) -> CsrMatrix:
    """Stiffness matrix for constant unit diffusion, cached per DOF map."""
    cached = dm._cache.get("unit_stiffness")
    if cached is None:
        cached = assemble_stiffness(dm, Literal(1.0),
                                    FeFunction(dm, np.zeros(dm.n_dofs)))
        dm._cache["unit_stiffness"] = cached
    return cached


def linearized_system(dm: DofMap, tau: float) -> CsrMatrix:
    """System matrix A + tau K of the linearized scheme.

    On a uniform 1D mesh its rows read
    (h/6 - tau/h, 2h/3 + 2 tau/h, h/6 - tau/h).
    """
    return _combine(dm, assemble_mass(dm), 1.0, unit_stiffness(dm), tau)


def step_linearized(prev: FeFunction, n: int, cfg: SchemeConfig,
                         cs: CoefficientSet, forcing=None) -> TimeStepRecord:
    """Implicit diffusion, explicit nonlocal source: one tridiagonal
    solve advances the step, no inner iteration.

    First order in time; restricted to k = 1 and 1D meshes.
    """
    dm = prev.dofmap
    if dm.mesh.dim != 1:
        raise UnsupportedDimensionError(
            "the linearized scheme is implemented for 1D meshes only")
    _require_unit_k(cs)
    tau = cfg.tau
    t_prev = (n - 1) * tau
    mass = assemble_mass(dm)
    rhs = (mass.matvec(prev.coeffs)
           + tau * assemble_load(dm, cs.f, prev, cs.lam)
           + tau * _forcing_vector(dm, forcing, t_prev))
    system = linearized_system(dm, tau)
    v = solve(system, rhs, LinearSolveOptions(method="tridiagonal"))
    state = FeFunction(dm, v)
    return TimeStepRecord(n=n, t=n * tau, state=state, nonlinear_iters=0,
                          nonlocal_value=nonlocal_integral(dm, cs.f, state))


_STEPPERS = {
    "backward_euler": step_backward_euler,
    "crank_nicolson": step_crank_nicolson,
    "linearized": step_linearized,
}


def number_of_steps(cfg: SchemeConfig) -> int:
    ratio = cfg.t_end / cfg.tau
    n = round(ratio)
    if abs(ratio - n) > 1e-9:
        raise ValueError(
            f"t_end/tau = {ratio!r} is not an integer step count")
    return int(n)


def run(u0: Expr, cfg: SchemeConfig, cs: CoefficientSet, mesh: Mesh,
        mms=None) -> list[TimeStepRecord]:
    """Advance from the interpolated initial state to t_end.

    Returns one record per time level including the initial one.  A
    time step larger than the mesh size only compromises the discrete
    uniqueness guarantee, so it is reported as a warning, not an error.
    """
    nsteps = number_of_steps(cfg)
    if cfg.tau / mesh.h > 1.0:
        logger.warning(
            "tau/h = %.3g exceeds 1; uniqueness of the discrete solution "
            "is only guaranteed for small tau/h", cfg.tau / mesh.h)
    dm = DofMap(mesh)
    forcing = getattr(mms, "forcing", None) if mms is not None else None
    state = interpolate(dm, u0, t=0.0)
    records = [TimeStepRecord(
        n=0, t=0.0, state=state, nonlinear_iters=0,
        nonlocal_value=nonlocal_integral(dm, cs.f, state))]
    stepper = _STEPPERS[cfg.scheme]
    for n in range(1, nsteps + 1):
        records.append(stepper(records[-1].state, n, cfg, cs, forcing))
    return records


def semidiscrete_residual(dm: DofMap, cs: CoefficientSet, state: FeFunction,
                          state_t: FeFunction, t: float = 0.0,
                          forcing=None) -> np.ndarray:
    """Residual vector of the method-of-lines system
    A a'(t) + B(a) a - source(a) - g(t) at a given state and slope."""
    mass = assemble_mass(dm)
    stiff = assemble_stiffness(dm, cs.k, state, bounds=(cs.k1, cs.k2))
    return (mass.matvec(state_t.coeffs) + stiff.matvec(state.coeffs)
            - assemble_load(dm, cs.f, state, cs.lam)
            - _forcing_vector(dm, forcing, t))
