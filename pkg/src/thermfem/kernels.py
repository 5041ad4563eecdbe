"""Hot numeric kernels: numba-jitted loops with pure-numpy fallbacks.

The backend is fixed at import time from the ``THERMFEM_KERNELS``
environment variable:

* ``auto``  (default) use numba when importable, numpy otherwise;
* ``numba`` require numba, fail loudly if it is missing;
* ``numpy`` force the pure-numpy fallbacks.

Both variants of a kernel compute the same quantity.  Accumulation
orders coincide, but results are only guaranteed reproducible per
backend; ``benchmarks/bench_kernels.py`` times one against the other.
"""

from __future__ import annotations

import math
import os

import numpy as np

_requested = os.environ.get("THERMFEM_KERNELS", "auto").strip().lower()
if _requested not in ("auto", "numba", "numpy"):
    raise ValueError(
        f"THERMFEM_KERNELS must be auto, numba or numpy, got {_requested!r}")

_njit = None
if _requested in ("auto", "numba"):
    try:
        from numba import njit as _njit
    except ImportError:
        if _requested == "numba":
            raise
        _njit = None

HAVE_NUMBA = _njit is not None
BACKEND = "numba" if HAVE_NUMBA else "numpy"


# ----------------------------------------------------------------- matvec

def _csr_matvec_loop(indptr, indices, data, x):
    n = indptr.shape[0] - 1
    out = np.zeros(n)
    for i in range(n):
        acc = 0.0
        for p in range(indptr[i], indptr[i + 1]):
            acc += data[p] * x[indices[p]]
        out[i] = acc
    return out


def csr_matvec_numpy(indptr, indices, data, x):
    n = indptr.shape[0] - 1
    prod = data * x[indices]
    counts = np.diff(indptr)
    if n > 0 and prod.size > 0 and counts.min() > 0:
        return np.add.reduceat(prod, indptr[:-1])
    out = np.zeros(n)
    np.add.at(out, np.repeat(np.arange(n), counts), prod)
    return out


# ------------------------------------------------------- tridiagonal solve

def _thomas_loop(sub, diag, sup, b):
    """Thomas elimination for a tridiagonal system.

    Returns (x, ok); ok is False when a pivot falls below 1e-300.
    """
    n = diag.shape[0]
    x = np.zeros(n)
    cp = np.zeros(n)
    dp = np.zeros(n)
    piv = diag[0]
    if abs(piv) < 1e-300:
        return x, False
    if n > 1:
        cp[0] = sup[0] / piv
    dp[0] = b[0] / piv
    for i in range(1, n):
        piv = diag[i] - sub[i - 1] * cp[i - 1]
        if abs(piv) < 1e-300:
            return x, False
        if i < n - 1:
            cp[i] = sup[i] / piv
        dp[i] = (b[i] - sub[i - 1] * dp[i - 1]) / piv
    x[n - 1] = dp[n - 1]
    for i in range(n - 2, -1, -1):
        x[i] = dp[i] - cp[i] * x[i + 1]
    return x, True


thomas_numpy = _thomas_loop


# -------------------------------------------------------- conjugate gradient

def cg_numpy(indptr, indices, data, b, x, rtol, maxit):
    """Plain CG on a SPD CSR matrix; x is the start vector, updated in place.

    Returns (iterations, relative residual from the recurrence).
    """
    n = b.shape[0]
    bnorm = math.sqrt(float(np.dot(b, b)))
    if bnorm == 0.0:
        x[:] = 0.0
        return 0, 0.0
    r = b - csr_matvec_numpy(indptr, indices, data, x)
    p = r.copy()
    rr = float(np.dot(r, r))
    it = 0
    while it < maxit and math.sqrt(rr) > rtol * bnorm:
        ap = csr_matvec_numpy(indptr, indices, data, p)
        alpha = rr / float(np.dot(p, ap))
        x += alpha * p
        r -= alpha * ap
        rr_new = float(np.dot(r, r))
        p = r + (rr_new / rr) * p
        rr = rr_new
        it += 1
    return it, math.sqrt(rr) / bnorm


# ----------------------------------------------------------- scatter add

def _scatter_add_loop(out, idx, vals):
    for i in range(idx.shape[0]):
        out[idx[i]] += vals[i]
    return out


def scatter_add_numpy(out, idx, vals):
    np.add.at(out, idx, vals)
    return out


# ----------------------------------------------------------- backend wiring

if HAVE_NUMBA:
    csr_matvec_numba = _njit(cache=True)(_csr_matvec_loop)
    thomas_numba = _njit(cache=True)(_thomas_loop)

    def _make_cg_numba():
        # cg calls the jitted matvec, so it is defined around that symbol
        # rather than jitted from _cg_loop
        from numba import njit

        @njit(cache=True)
        def cg(indptr, indices, data, b, x, rtol, maxit):
            bnorm = math.sqrt(np.dot(b, b))
            if bnorm == 0.0:
                x[:] = 0.0
                return 0, 0.0
            r = b - csr_matvec_numba(indptr, indices, data, x)
            p = r.copy()
            rr = np.dot(r, r)
            it = 0
            while it < maxit and math.sqrt(rr) > rtol * bnorm:
                ap = csr_matvec_numba(indptr, indices, data, p)
                alpha = rr / np.dot(p, ap)
                x += alpha * p
                r -= alpha * ap
                rr_new = np.dot(r, r)
                p = r + (rr_new / rr) * p
                rr = rr_new
                it += 1
            return it, math.sqrt(rr) / bnorm

        return cg

    cg_numba = _make_cg_numba()
    scatter_add_numba = _njit(cache=True)(_scatter_add_loop)

    csr_matvec = csr_matvec_numba
    thomas_solve = thomas_numba
    cg_solve = cg_numba
    scatter_add = scatter_add_numba
else:
    csr_matvec_numba = None
    thomas_numba = None
    cg_numba = None
    scatter_add_numba = None

    csr_matvec = csr_matvec_numpy
    thomas_solve = thomas_numpy
    cg_solve = cg_numpy
    scatter_add = scatter_add_numpy


def implementations(name: str) -> dict:
    """Available implementations of one kernel, keyed by backend name."""
    table = {
        "csr_matvec": {"numpy": csr_matvec_numpy, "numba": csr_matvec_numba},
        "thomas": {"numpy": thomas_numpy, "numba": thomas_numba},
        "cg": {"numpy": cg_numpy, "numba": cg_numba},
        "scatter_add": {"numpy": scatter_add_numpy, "numba": scatter_add_numba},
    }
    impls = table[name]
    return {k: v for k, v in impls.items() if v is not None}


def warmup() -> None:
    """Trigger jit compilation of the active kernels on tiny inputs."""
    indptr = np.array([0, 1, 2, 3], dtype=np.int64)
    indices = np.array([0, 1, 2], dtype=np.int64)
    data = np.ones(3)
    x = np.ones(3)
    csr_matvec(indptr, indices, data, x)
    thomas_solve(np.zeros(2), np.ones(3), np.zeros(2), x.copy())
    cg_solve(indptr, indices, data, x.copy(), np.zeros(3), 1e-12, 10)
    scatter_add(np.zeros(3), indices, data)
