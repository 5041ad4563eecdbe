import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from thermfem.coeff import parse
from thermfem.fespace import (DofMap, assemble_load, assemble_mass,
                              assemble_stiffness, zero_function)
from thermfem.mesh import make_interval_mesh
from thermfem.sparse import (CsrMatrix, LinearSolveOptions, NotConvergedError,
                             SingularPivotError, solve)


def identity(n):
    return CsrMatrix(n, np.arange(n + 1), np.arange(n), np.ones(n),
                     symmetric=True)


def test_from_coo_sums_duplicates_and_sorts():
    m = CsrMatrix.from_coo(3, [0, 0, 2, 1], [1, 1, 0, 1], [1.0, 2.0, 4.0, 5.0])
    dense = np.zeros((3, 3))
    dense[0, 1] = 3.0
    dense[2, 0] = 4.0
    dense[1, 1] = 5.0
    assert np.array_equal(m.to_dense(), dense)
    for i in range(3):
        row = m.indices[m.indptr[i]:m.indptr[i + 1]]
        assert np.all(np.diff(row) > 0)


def test_matvec_identity():
    x = np.array([3.0, -1.0, 2.0])
    assert np.array_equal(identity(3).matvec(x), x)


def test_matvec_zero_matrix():
    m = CsrMatrix(3, np.zeros(4, dtype=int), np.zeros(0, dtype=int),
                  np.zeros(0))
    assert np.array_equal(m.matvec(np.ones(3)), np.zeros(3))


def test_matvec_against_dense_oracle():
    # 1D mass matrix on h = 0.5 as in the assembly closed forms
    dm = DofMap(make_interval_mesh(-1.0, 1.0, 4))
    mass = assemble_mass(dm)
    x = np.ones(mass.n)
    expected = mass.to_dense() @ x
    assert np.allclose(mass.matvec(x), expected, rtol=1e-15, atol=0)
    # interior row sum: 2h/3 + 2 * h/6 = h
    assert np.isclose(expected[1], 0.5, rtol=1e-14)


def test_matvec_dimension_mismatch():
    with pytest.raises(ValueError):
        identity(3).matvec(np.ones(4))


def test_solve_identity():
    b = np.array([2.0, -1.0, 0.5])
    x = solve(identity(3), b, LinearSolveOptions(method="tridiagonal"))
    assert np.allclose(x, b, rtol=0, atol=0)


def test_solve_poisson_nodal_values():
    # -u'' = 1 on (0, 1): the P1 solution interpolates u(x) = x(1-x)/2.
    # The constant-1 load is (1, phi_j) = h for every interior hat; the
    # nonlocal load with f = 1 and lam = I^2 = 1 produces exactly that.
    mesh = make_interval_mesh(0.0, 1.0, 4)
    dm = DofMap(mesh)
    stiff = assemble_stiffness(dm, parse("1"), zero_function(dm))
    b = assemble_load(dm, parse("1"), zero_function(dm), lam=1.0)
    assert np.allclose(b, 0.25, rtol=1e-14)
    x = solve(stiff, b, LinearSolveOptions(method="tridiagonal"))
    assert np.allclose(x, [0.09375, 0.125, 0.09375], rtol=1e-13)


def test_cg_matches_tridiagonal():
    mesh = make_interval_mesh(0.0, 1.0, 16)
    dm = DofMap(mesh)
    stiff = assemble_stiffness(dm, parse("1"), zero_function(dm))
    b = np.sin(np.linspace(0.2, 2.8, dm.n_dofs))
    x_tri = solve(stiff, b, LinearSolveOptions(method="tridiagonal"))
    x_cg = solve(stiff, b, LinearSolveOptions(method="conjugate_gradient"))
    assert np.linalg.norm(x_tri - x_cg) <= 1e-10 * np.linalg.norm(x_tri)


@st.composite
def spd_tridiagonal(draw):
    n = draw(st.integers(min_value=2, max_value=64))
    rng = np.random.default_rng(draw(st.integers(0, 2 ** 32 - 1)))
    off = rng.uniform(-1.0, 1.0, n - 1)
    diag = np.zeros(n)
    diag[:-1] += np.abs(off)
    diag[1:] += np.abs(off)
    diag += rng.uniform(0.1, 1.0, n)      # strict diagonal dominance
    b = rng.uniform(-1.0, 1.0, n)
    return diag, off, b


@given(spd_tridiagonal())
@settings(max_examples=40, deadline=None)
def test_thomas_and_cg_agree_on_random_spd(data):
    diag, off, b = data
    n = diag.size
    rows = np.concatenate([np.arange(n), np.arange(n - 1), np.arange(1, n)])
    cols = np.concatenate([np.arange(n), np.arange(1, n), np.arange(n - 1)])
    vals = np.concatenate([diag, off, off])
    m = CsrMatrix.from_coo(n, rows, cols, vals, symmetric=True)
    x_tri = solve(m, b, LinearSolveOptions(method="tridiagonal"))
    x_cg = solve(m, b, LinearSolveOptions(method="conjugate_gradient"))
    scale = max(np.linalg.norm(x_tri), 1e-30)
    assert np.linalg.norm(x_tri - x_cg) <= 1e-10 * scale
    # independent oracle: dense solve
    x_dense = np.linalg.solve(m.to_dense(), b)
    assert np.allclose(x_tri, x_dense, rtol=1e-9, atol=1e-12)
    # CG contract: the final true residual meets the tolerance
    res = np.linalg.norm(b - m.matvec(x_cg)) / max(np.linalg.norm(b), 1e-30)
    assert res <= 1e-12


def test_cg_not_converged():
    mesh = make_interval_mesh(0.0, 1.0, 64)
    dm = DofMap(mesh)
    stiff = assemble_stiffness(dm, parse("1"), zero_function(dm))
    b = np.ones(dm.n_dofs)
    with pytest.raises(NotConvergedError):
        solve(stiff, b, LinearSolveOptions(method="conjugate_gradient",
                                           max_iterations=2))


def test_singular_pivot():
    m = CsrMatrix.from_coo(2, [0, 1], [0, 1], [1e-301, 1e-301],
                           symmetric=True)
    with pytest.raises(SingularPivotError):
        solve(m, np.ones(2), LinearSolveOptions(method="tridiagonal"))


def test_tridiagonal_rejects_wide_bandwidth():
    m = CsrMatrix.from_coo(3, [0, 2, 0, 1, 2], [2, 0, 0, 1, 2],
                           [1.0, 1.0, 4.0, 4.0, 4.0], symmetric=True)
    with pytest.raises(ValueError):
        solve(m, np.ones(3), LinearSolveOptions(method="tridiagonal"))


def test_solve_requires_spd_flag():
    m = CsrMatrix(2, [0, 1, 2], [0, 1], [1.0, 1.0], symmetric=False)
    with pytest.raises(ValueError):
        solve(m, np.ones(2))


def test_solve_dimension_mismatch():
    with pytest.raises(ValueError):
        solve(identity(3), np.ones(4))


def test_symmetry_enforced_by_averaging():
    m = CsrMatrix.from_coo(2, [0, 1], [1, 0], [1.0, 1.0 + 1e-13],
                           symmetric=True)
    assert m.symmetry_error() == 0.0


def test_options_validation():
    with pytest.raises(ValueError):
        LinearSolveOptions(method="lu")
    with pytest.raises(ValueError):
        LinearSolveOptions(rel_tolerance=0.0)
    with pytest.raises(ValueError):
        LinearSolveOptions(max_iterations=0)


def test_dump_coo_roundtrip():
    dm = DofMap(make_interval_mesh(0.0, 1.0, 4))
    mass = assemble_mass(dm)
    buf = io.StringIO()
    mass.dump_coo(buf)
    lines = buf.getvalue().strip().splitlines()
    assert len(lines) == mass.nnz
    rebuilt = np.zeros((mass.n, mass.n))
    for line in lines:
        i, j, v = line.split()
        rebuilt[int(i), int(j)] = float(v)
    assert np.array_equal(rebuilt, mass.to_dense())
