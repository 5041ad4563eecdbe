"""Time the numba kernels against their pure-numpy fallbacks.

Builds representative workloads from an actual assembled problem (a
structured 2D stiffness matrix and a long 1D tridiagonal system) and
reports per-call times plus the numba speedup.  Run as

    python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from thermfem import kernels
from thermfem.coeff import parse, preset
from thermfem.fespace import DofMap, assemble_mass, assemble_stiffness, \
    interpolate
from thermfem.mesh import make_interval_mesh, make_rect_mesh
from thermfem.sparse import CsrMatrix, _tridiagonal_bands


def build_cases():
    mesh2d = make_rect_mesh(0.0, 0.0, 1.0, 1.0, 64, 64)
    dm2d = DofMap(mesh2d)
    state = interpolate(dm2d, parse("sin(pi*x)*sin(pi*y)"))
    stiff = assemble_stiffness(dm2d, preset("smooth").k, state)
    mass = assemble_mass(dm2d)
    system = CsrMatrix(dm2d.n_dofs, dm2d.indptr, dm2d.indices,
                       mass.data + 1e-3 * stiff.data, symmetric=True)
    x = np.linspace(0.0, 1.0, dm2d.n_dofs)
    b = system.matvec(x)

    mesh1d = make_interval_mesh(-1.0, 1.0, 1024)
    dm1d = DofMap(mesh1d)
    tri = CsrMatrix(dm1d.n_dofs, dm1d.indptr, dm1d.indices,
                    assemble_mass(dm1d).data
                    + 1e-3 * assemble_stiffness(
                        dm1d, parse("1"),
                        interpolate(dm1d, parse("0"))).data,
                    symmetric=True)
    sub, diag, sup = _tridiagonal_bands(tri)
    rhs = np.sin(np.linspace(0.0, 3.0, dm1d.n_dofs))

    rng = np.random.default_rng(0)
    n_scatter = 9 * mesh2d.n_elements
    idx = rng.integers(0, dm2d.n_dofs, n_scatter).astype(np.int64)
    vals = rng.standard_normal(n_scatter)

    cases = {
        "csr_matvec": {
            "args": lambda: (system.indptr, system.indices, system.data,
                             x.copy()),
            "note": f"2D stiffness, n={system.n}, nnz={system.nnz}",
        },
        "thomas": {
            "args": lambda: (sub, diag, sup, rhs.copy()),
            "note": f"1D system, n={diag.size}",
        },
        "cg": {
            "args": lambda: (system.indptr, system.indices, system.data,
                             b.copy(), np.zeros(system.n), 1e-10,
                             10 * system.n),
            "note": f"mass + tau * stiffness, n={system.n}",
        },
        "scatter_add": {
            "args": lambda: (np.zeros(dm2d.n_dofs), idx, vals),
            "note": f"{n_scatter} assembly contributions",
        },
    }
    return cases


def time_call(fn, make_args, repeat):
    best = min(timeit.repeat(lambda: fn(*make_args()), number=1,
                             repeat=repeat))
    return best


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeat", type=int, default=20,
                        help="timing repetitions per kernel (best is kept)")
    args = parser.parse_args()

    kernels.warmup()
    cases = build_cases()
    print(f"active backend: {kernels.BACKEND}")
    print(f"{'kernel':<12} {'numpy [ms]':>12} {'numba [ms]':>12} "
          f"{'speedup':>9}   workload")
    for name, case in cases.items():
        impls = kernels.implementations(name)
        t_numpy = time_call(impls["numpy"], case["args"], args.repeat)
        if "numba" in impls:
            impls["numba"](*case["args"]())     # ensure compiled
            t_numba = time_call(impls["numba"], case["args"], args.repeat)
            ratio = f"{t_numpy / t_numba:8.1f}x"
            numba_ms = f"{1e3 * t_numba:12.3f}"
        else:
            ratio = "     n/a"
            numba_ms = "         n/a"
        print(f"{name:<12} {1e3 * t_numpy:12.3f} {numba_ms} "
              f"{ratio}   {case['note']}")


if __name__ == "__main__":
    main()
