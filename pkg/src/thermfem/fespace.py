"""P1 finite element space: DOF maps, quadrature, assembly, norms.

Homogeneous Dirichlet conditions are imposed by eliminating boundary
vertices from the unknowns, so every assembled operator is symmetric
positive definite.  Nonlinear coefficients are evaluated at quadrature
points of the current iterate; the same rule is used for the numerator
and denominator of the nonlocal source so the discrete system stays
internally consistent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .coeff import (Expr, HypothesisViolation, differentiate, evaluate)
from .mesh import Mesh
from .sparse import CsrMatrix, LinearSolveOptions, solve


class NonpositiveIntegralError(HypothesisViolation):
    """The discrete nonlocal integral came out non-positive, which the
    positivity hypothesis on f rules out."""


# ------------------------------------------------------------- quadrature

@dataclass(frozen=True, eq=False)
class QuadratureRule:
    """Reference-element rule: points on [0,1] (1D) or barycentric (2D).

    Weights sum to the reference measure (1 for the unit interval, 1/2
    for the unit triangle) and integrate polynomials up to degree
    ``order`` exactly.
    """

    dim: int
    points: np.ndarray
    weights: np.ndarray
    order: int

    @property
    def n_points(self) -> int:
        return self.weights.shape[0]

    @property
    def cache_key(self) -> tuple:
        return (self.dim, self.order, self.points.tobytes())

    def shape_values(self) -> np.ndarray:
        """P1 basis values at the quadrature points, shape (nq, nv)."""
        if self.dim == 1:
            xi = self.points
            return np.stack([1.0 - xi, xi], axis=1)
        return self.points


def gauss_interval(npoints: int) -> QuadratureRule:
    """Gauss-Legendre rule mapped to [0, 1]; exact to degree 2n - 1."""
    nodes, weights = np.polynomial.legendre.leggauss(npoints)
    return QuadratureRule(1, 0.5 * (nodes + 1.0), 0.5 * weights,
                          2 * npoints - 1)


def tri_midedge() -> QuadratureRule:
    """Three-point edge-midpoint rule on the triangle; exact to degree 2."""
    pts = np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]])
    return QuadratureRule(2, pts, np.full(3, 1.0 / 6.0), 2)


def tri_seven_point() -> QuadratureRule:
    """Seven-point rule on the triangle; exact to degree 5."""
    s15 = np.sqrt(15.0)
    a1 = (6.0 + s15) / 21.0
    a2 = (6.0 - s15) / 21.0
    w1 = (155.0 + s15) / 2400.0
    w2 = (155.0 - s15) / 2400.0
    pts = [[1 / 3, 1 / 3, 1 / 3]]
    wts = [9.0 / 80.0]
    for a, w in ((a1, w1), (a2, w2)):
        b = 1.0 - 2.0 * a
        pts += [[b, a, a], [a, b, a], [a, a, b]]
        wts += [w, w, w]
    return QuadratureRule(2, np.array(pts), np.array(wts), 5)


_ASSEMBLY_RULES = {1: gauss_interval(2), 2: tri_midedge()}
_NORM_RULES = {1: gauss_interval(3), 2: tri_seven_point()}
_PROJECTION_RULES = {1: gauss_interval(8), 2: tri_seven_point()}


def assembly_rule(dim: int) -> QuadratureRule:
    """Default rule for nonlinear-coefficient assembly (order >= 2)."""
    return _ASSEMBLY_RULES[dim]


def norm_rule(dim: int) -> QuadratureRule:
    """Default rule for error norms (order >= 5)."""
    return _NORM_RULES[dim]


def projection_rule(dim: int) -> QuadratureRule:
    """High-order rule for forms built from the exact solution."""
    return _PROJECTION_RULES[dim]


# ---------------------------------------------------------------- DOF map

class DofMap:
    """Mapping from mesh vertices to unknowns of the P1 space.

    By default boundary vertices are eliminated (functions vanish on the
    boundary); ``include_boundary=True`` keeps every vertex as an
    unknown, which the tests use for partition-of-unity checks.  The
    assembly pattern, element geometry and mass matrix are precomputed
    or cached here, shared by all assemblies on the same mesh.
    """

    def __init__(self, mesh: Mesh, include_boundary: bool = False):
        self.mesh = mesh
        self.include_boundary = include_boundary
        nv = mesh.n_vertices
        if include_boundary:
            free = np.ones(nv, dtype=bool)
        else:
            free = ~mesh.boundary_mask()
        self.interior_dofs = np.nonzero(free)[0]
        self.n_dofs = int(self.interior_dofs.size)
        self.vertex_to_dof = np.full(nv, -1, dtype=np.int64)
        self.vertex_to_dof[self.interior_dofs] = np.arange(self.n_dofs)
        self.el_dofs = self.vertex_to_dof[mesh.elements]

        self._build_geometry()
        self._build_pattern()
        self._qp_cache = {}
        self._cache = {}

    # -- geometry ---------------------------------------------------------

    def _build_geometry(self):
        mesh = self.mesh
        pts = mesh.vertices[mesh.elements]            # (n_el, nv, dim)
        if mesh.dim == 1:
            length = pts[:, 1, 0] - pts[:, 0, 0]
            self.el_measure = length
            grads = np.empty((mesh.n_elements, 2, 1))
            grads[:, 0, 0] = -1.0 / length
            grads[:, 1, 0] = 1.0 / length
            self.el_grads = grads
        else:
            d1 = pts[:, 1] - pts[:, 0]
            d2 = pts[:, 2] - pts[:, 0]
            area = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
            self.el_measure = area
            grads = np.empty((mesh.n_elements, 3, 2))
            for i in range(3):
                a = pts[:, (i + 1) % 3]
                b = pts[:, (i + 2) % 3]
                grads[:, i, 0] = (a[:, 1] - b[:, 1]) / (2.0 * area)
                grads[:, i, 1] = (b[:, 0] - a[:, 0]) / (2.0 * area)
            self.el_grads = grads

    # -- sparsity pattern --------------------------------------------------

    def _build_pattern(self):
        eld = self.el_dofs
        n_el, nv = eld.shape
        rows = np.broadcast_to(eld[:, :, None], (n_el, nv, nv)).ravel()
        cols = np.broadcast_to(eld[:, None, :], (n_el, nv, nv)).ravel()
        valid = (rows >= 0) & (cols >= 0)
        key = rows[valid] * max(self.n_dofs, 1) + cols[valid]
        uniq, inv = np.unique(key, return_inverse=True)
        self._mat_valid = valid
        self._mat_slots = inv.astype(np.int64)
        urows = uniq // max(self.n_dofs, 1)
        self.indices = (uniq % max(self.n_dofs, 1)).astype(np.int64)
        self.indptr = np.searchsorted(urows, np.arange(self.n_dofs + 1))
        self.nnz = int(uniq.size)
        # position of the transposed entry, for symmetrization
        tkey = self.indices * max(self.n_dofs, 1) + urows
        self._tperm = np.searchsorted(uniq, tkey)

        flat = eld.ravel()
        self._vec_valid = flat >= 0
        self._vec_slots = flat[self._vec_valid]

    def matrix_from_element_values(self, vals: np.ndarray) -> CsrMatrix:
        """Assemble local (n_el, nv, nv) blocks into a symmetric CSR matrix."""
        data = np.zeros(self.nnz)
        kernels.scatter_add(data, self._mat_slots,
                            np.ascontiguousarray(vals.ravel()[self._mat_valid]))
        data = 0.5 * (data + data[self._tperm])
        return CsrMatrix(self.n_dofs, self.indptr, self.indices, data,
                         symmetric=True)

    def vector_from_element_values(self, vals: np.ndarray) -> np.ndarray:
        """Assemble local (n_el, nv) contributions into a load vector."""
        out = np.zeros(self.n_dofs)
        kernels.scatter_add(out, self._vec_slots,
                            np.ascontiguousarray(vals.ravel()[self._vec_valid]))
        return out

    # -- quadrature geometry ----------------------------------------------

    def quad_geometry(self, rule: QuadratureRule):
        """Physical quadrature points and weights for every element.

        Returns (coords, wq, shapes): coords maps variable names to
        (n_el, nq) arrays, wq holds physical weights (reference weight
        times Jacobian), shapes the reference basis values (nq, nv).
        """
        key = rule.cache_key
        cached = self._qp_cache.get(key)
        if cached is not None:
            return cached
        mesh = self.mesh
        shapes = rule.shape_values()
        pts = mesh.vertices[mesh.elements]
        if mesh.dim == 1:
            x = np.einsum("qa,ea->eq", shapes, pts[:, :, 0])
            coords = {"x": x}
            wq = rule.weights[None, :] * self.el_measure[:, None]
        else:
            x = np.einsum("qa,ea->eq", shapes, pts[:, :, 0])
            y = np.einsum("qa,ea->eq", shapes, pts[:, :, 1])
            coords = {"x": x, "y": y}
            wq = rule.weights[None, :] * (2.0 * self.el_measure)[:, None]
        out = (coords, wq, shapes)
        self._qp_cache[key] = out
        return out


# ------------------------------------------------------------- FE function

@dataclass(eq=False)
class FeFunction:
    """Member of the P1 space: one coefficient per free vertex."""

    dofmap: DofMap
    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.coeffs.shape != (self.dofmap.n_dofs,):
            raise ValueError("coefficient vector has the wrong length")

    def vertex_values(self) -> np.ndarray:
        """Values at every mesh vertex (zero on eliminated boundary)."""
        full = np.zeros(self.dofmap.mesh.n_vertices)
        full[self.dofmap.interior_dofs] = self.coeffs
        return full

    def value_at_vertex(self, vertex: int) -> float:
        dof = self.dofmap.vertex_to_dof[vertex]
        return 0.0 if dof < 0 else float(self.coeffs[dof])

    def __sub__(self, other: "FeFunction") -> "FeFunction":
        if other.dofmap is not self.dofmap:
            raise ValueError("functions live on different DOF maps")
        return FeFunction(self.dofmap, self.coeffs - other.coeffs)

    def copy(self) -> "FeFunction":
        return FeFunction(self.dofmap, self.coeffs.copy())


def zero_function(dm: DofMap) -> FeFunction:
    return FeFunction(dm, np.zeros(dm.n_dofs))


def _values_at_qp(dm: DofMap, coeffs: np.ndarray, shapes: np.ndarray):
    full = np.zeros(dm.mesh.n_vertices)
    full[dm.interior_dofs] = coeffs
    vals_el = full[dm.mesh.elements]
    return np.einsum("ea,qa->eq", vals_el, shapes)


def _eval_field(expr: Expr, coords: dict, t: float):
    out = evaluate(expr, t=t, **coords)
    ref = next(iter(coords.values()))
    return np.broadcast_to(np.asarray(out, dtype=float), ref.shape)


# --------------------------------------------------------------- assembly

def assemble_mass(dm: DofMap, rule: QuadratureRule | None = None) -> CsrMatrix:
    """Gram matrix of the basis functions; exact for P1 (quadratic
    integrand) with the default rule.  Cached per DOF map."""
    rule = rule or assembly_rule(dm.mesh.dim)
    key = ("mass",) + rule.cache_key
    cached = dm._cache.get(key)
    if cached is not None:
        return cached
    _, wq, shapes = dm.quad_geometry(rule)
    vals = np.einsum("eq,qa,qb->eab", wq, shapes, shapes)
    mat = dm.matrix_from_element_values(vals)
    dm._cache[key] = mat
    return mat


def _stiffness_from_kq(dm: DofMap, kq: np.ndarray, wq: np.ndarray) -> CsrMatrix:
    # P1 gradients are constant per element, so the coefficient only
    # enters through its per-element weighted average
    kbar = np.sum(wq * kq, axis=1)
    gdots = np.einsum("ead,ebd->eab", dm.el_grads, dm.el_grads)
    return dm.matrix_from_element_values(gdots * kbar[:, None, None])


def _check_k_range(kq: np.ndarray, bounds) -> None:
    if bounds is None:
        return
    k1, k2 = bounds
    kmin = float(np.min(kq))
    kmax = float(np.max(kq))
    if kmin < k1 * (1.0 - 1e-9) or kmax > k2 * (1.0 + 1e-9):
        raise HypothesisViolation(
            f"diffusion coefficient left its declared range at a quadrature "
            f"point: sampled [{kmin:.12g}, {kmax:.12g}], declared "
            f"[{k1:g}, {k2:g}]", value=kmin if kmin < k1 else kmax)


def assemble_stiffness(dm: DofMap, k: Expr, state: FeFunction,
                       bounds=None,
                       rule: QuadratureRule | None = None) -> CsrMatrix:
    """Stiffness matrix with diffusion coefficient k evaluated at the
    current discrete state.

    ``bounds = (k1, k2)`` enables the range check on the sampled
    coefficient values.
    """
    rule = rule or assembly_rule(dm.mesh.dim)
    _, wq, shapes = dm.quad_geometry(rule)
    uq = _values_at_qp(dm, state.coeffs, shapes)
    kq = np.broadcast_to(np.asarray(evaluate(k, u=uq), dtype=float), uq.shape)
    _check_k_range(kq, bounds)
    return _stiffness_from_kq(dm, kq, wq)


def assemble_weighted_stiffness_exact(dm: DofMap, k: Expr, u_exact: Expr,
                                      t: float, bounds=None,
                                      rule: QuadratureRule | None = None
                                      ) -> CsrMatrix:
    """Stiffness matrix weighted by k composed with a known exact field.

    Uses a high-order rule by default because this form feeds the
    elliptic projection, whose quadrature error must stay far below the
    discretization error being measured.
    """
    rule = rule or projection_rule(dm.mesh.dim)
    coords, wq, _ = dm.quad_geometry(rule)
    uq = _eval_field(u_exact, coords, t)
    kq = np.broadcast_to(np.asarray(evaluate(k, u=uq), dtype=float), uq.shape)
    _check_k_range(kq, bounds)
    return _stiffness_from_kq(dm, kq, wq)


def nonlocal_integral(dm: DofMap, f: Expr, state: FeFunction,
                      rule: QuadratureRule | None = None) -> float:
    """Integral of f at the discrete state over the whole domain."""
    rule = rule or assembly_rule(dm.mesh.dim)
    _, wq, shapes = dm.quad_geometry(rule)
    uq = _values_at_qp(dm, state.coeffs, shapes)
    fq = np.broadcast_to(np.asarray(evaluate(f, u=uq), dtype=float), uq.shape)
    value = float(np.sum(wq * fq))
    if value <= 0.0:
        raise NonpositiveIntegralError(
            f"nonlocal integral is {value:.6g} <= 0; the positivity "
            f"hypothesis on f fails at the discrete state")
    return value


def assemble_load(dm: DofMap, f: Expr, state: FeFunction, lam: float,
                  rule: QuadratureRule | None = None) -> np.ndarray:
    """Nonlocal source vector lam * (f(u_h), phi_j) / I(u_h)^2.

    Numerator and denominator share one quadrature rule.
    """
    rule = rule or assembly_rule(dm.mesh.dim)
    if lam == 0.0:
        return np.zeros(dm.n_dofs)
    _, wq, shapes = dm.quad_geometry(rule)
    uq = _values_at_qp(dm, state.coeffs, shapes)
    fq = np.broadcast_to(np.asarray(evaluate(f, u=uq), dtype=float), uq.shape)
    integral = float(np.sum(wq * fq))
    if integral <= 0.0:
        raise NonpositiveIntegralError(
            f"nonlocal integral is {integral:.6g} <= 0; the positivity "
            f"hypothesis on f fails at the discrete state")
    vals = np.einsum("eq,qa->ea", wq * fq, shapes)
    return (lam / integral ** 2) * dm.vector_from_element_values(vals)


def assemble_function_load(dm: DofMap, fn, t: float,
                           rule: QuadratureRule | None = None) -> np.ndarray:
    """Load vector (g(., t), phi_j) for a callable g(coords, t)."""
    rule = rule or assembly_rule(dm.mesh.dim)
    coords, wq, shapes = dm.quad_geometry(rule)
    gq = fn(coords, t)
    gq = np.broadcast_to(np.asarray(gq, dtype=float), wq.shape)
    vals = np.einsum("eq,qa->ea", wq * gq, shapes)
    return dm.vector_from_element_values(vals)


def interpolate(dm: DofMap, v: Expr, t: float = 0.0) -> FeFunction:
    """Nodal interpolant: the expression sampled at the free vertices."""
    pts = dm.mesh.vertices[dm.interior_dofs]
    coords = {"x": pts[:, 0]}
    if dm.mesh.dim == 2:
        coords["y"] = pts[:, 1]
    vals = evaluate(v, t=t, **coords)
    vals = np.broadcast_to(np.asarray(vals, dtype=float), (dm.n_dofs,))
    return FeFunction(dm, vals.copy())


def elliptic_projection(dm: DofMap, k: Expr, u_exact: Expr, t: float,
                        opts: LinearSolveOptions | None = None) -> FeFunction:
    """Projection whose k(u)-weighted gradient error is orthogonal to
    the discrete space.

    The right-hand side uses the symbolic gradient of the exact field so
    no numerical differentiation error enters.
    """
    rule = projection_rule(dm.mesh.dim)
    w_mat = assemble_weighted_stiffness_exact(dm, k, u_exact, t, rule=rule)
    coords, wq, _ = dm.quad_geometry(rule)
    uq = _eval_field(u_exact, coords, t)
    kq = np.broadcast_to(np.asarray(evaluate(k, u=uq), dtype=float), uq.shape)
    ux = _eval_field(differentiate(u_exact, "x"), coords, t)
    contrib = np.einsum("eq,ea->ea", wq * kq * ux, dm.el_grads[:, :, 0])
    if dm.mesh.dim == 2:
        uy = _eval_field(differentiate(u_exact, "y"), coords, t)
        contrib = contrib + np.einsum("eq,ea->ea", wq * kq * uy,
                                      dm.el_grads[:, :, 1])
    b = dm.vector_from_element_values(contrib)
    if opts is None:
        method = "tridiagonal" if dm.mesh.dim == 1 else "conjugate_gradient"
        opts = LinearSolveOptions(method=method)
    return FeFunction(dm, solve(w_mat, b, opts))


# ------------------------------------------------------------------ norms

def _l2_sq(dm: DofMap, u: FeFunction | None, v: Expr | None, t: float,
           rule: QuadratureRule) -> float:
    coords, wq, shapes = dm.quad_geometry(rule)
    err = np.zeros_like(wq)
    if u is not None:
        err = err + _values_at_qp(dm, u.coeffs, shapes)
    if v is not None:
        err = err - _eval_field(v, coords, t)
    return float(np.sum(wq * err * err))


def _h1_semi_sq(dm: DofMap, u: FeFunction | None, v: Expr | None, t: float,
                rule: QuadratureRule) -> float:
    coords, wq, _ = dm.quad_geometry(rule)
    total = 0.0
    names = ("x",) if dm.mesh.dim == 1 else ("x", "y")
    if u is not None:
        full = np.zeros(dm.mesh.n_vertices)
        full[dm.interior_dofs] = u.coeffs
        vals_el = full[dm.mesh.elements]
        grad_u = np.einsum("ea,ead->ed", vals_el, dm.el_grads)
    for d, name in enumerate(names):
        comp = np.zeros_like(wq)
        if u is not None:
            comp = comp + grad_u[:, d][:, None]
        if v is not None:
            comp = comp - _eval_field(differentiate(v, name), coords, t)
        total += float(np.sum(wq * comp * comp))
    return total


def norm_L2(u: FeFunction, rule: QuadratureRule | None = None) -> float:
    dm = u.dofmap
    rule = rule or norm_rule(dm.mesh.dim)
    return np.sqrt(_l2_sq(dm, u, None, 0.0, rule))


def norm_H1_semi(u: FeFunction, rule: QuadratureRule | None = None) -> float:
    dm = u.dofmap
    rule = rule or norm_rule(dm.mesh.dim)
    return np.sqrt(_h1_semi_sq(dm, u, None, 0.0, rule))


def error_L2(u: FeFunction | None, v: Expr | None, t: float = 0.0,
             dm: DofMap | None = None,
             rule: QuadratureRule | None = None) -> float:
    """L2 norm of u_h - v(., t); either argument may be omitted."""
    dm = dm if dm is not None else u.dofmap
    rule = rule or norm_rule(dm.mesh.dim)
    return np.sqrt(_l2_sq(dm, u, v, t, rule))


def error_H1_semi(u: FeFunction | None, v: Expr | None, t: float = 0.0,
                  dm: DofMap | None = None,
                  rule: QuadratureRule | None = None) -> float:
    """H1 seminorm of u_h - v(., t); either argument may be omitted."""
    dm = dm if dm is not None else u.dofmap
    rule = rule or norm_rule(dm.mesh.dim)
    return np.sqrt(_h1_semi_sq(dm, u, v, t, rule))


def mass_norm(dm: DofMap, vec: np.ndarray) -> float:
    """Discrete L2 norm sqrt(v' A v) through the cached mass matrix."""
    mass = assemble_mass(dm)
    return float(np.sqrt(max(np.dot(vec, mass.matvec(vec)), 0.0)))


def max_gradient(u: FeFunction) -> float:
    """Max elementwise gradient magnitude of a P1 function."""
    dm = u.dofmap
    full = np.zeros(dm.mesh.n_vertices)
    full[dm.interior_dofs] = u.coeffs
    vals_el = full[dm.mesh.elements]
    grad_u = np.einsum("ea,ead->ed", vals_el, dm.el_grads)
    return float(np.linalg.norm(grad_u, axis=1).max())
