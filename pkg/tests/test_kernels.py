import os
import subprocess
import sys

import numpy as np
import pytest

from thermfem import kernels

needs_numba = pytest.mark.skipif(not kernels.HAVE_NUMBA,
                                 reason="numba not available")


def random_csr(n, seed):
    rng = np.random.default_rng(seed)
    dense = np.zeros((n, n))
    dense[np.diag_indices(n)] = rng.uniform(1.0, 2.0, n)
    for _ in range(3 * n):
        i, j = rng.integers(0, n, 2)
        dense[i, j] = rng.uniform(-1.0, 1.0)
    indptr = [0]
    indices = []
    data = []
    for i in range(n):
        cols = np.nonzero(dense[i])[0]
        indices.extend(cols)
        data.extend(dense[i, cols])
        indptr.append(len(indices))
    return (np.array(indptr, dtype=np.int64),
            np.array(indices, dtype=np.int64), np.array(data), dense)


@needs_numba
def test_matvec_backends_agree():
    indptr, indices, data, dense = random_csr(40, seed=0)
    x = np.random.default_rng(1).standard_normal(40)
    a = kernels.csr_matvec_numpy(indptr, indices, data, x)
    b = kernels.csr_matvec_numba(indptr, indices, data, x)
    assert np.allclose(a, b, rtol=1e-15, atol=1e-300)
    assert np.allclose(a, dense @ x, rtol=1e-13)


def test_matvec_handles_empty_rows():
    # one empty row must not derail the vectorized reduction
    indptr = np.array([0, 1, 1, 2], dtype=np.int64)
    indices = np.array([0, 2], dtype=np.int64)
    data = np.array([2.0, 3.0])
    out = kernels.csr_matvec_numpy(indptr, indices, data, np.array([1., 1., 1.]))
    assert np.array_equal(out, [2.0, 0.0, 3.0])


@needs_numba
def test_thomas_backends_agree_and_match_dense():
    rng = np.random.default_rng(2)
    n = 30
    sub = rng.uniform(-1, 1, n - 1)
    sup = rng.uniform(-1, 1, n - 1)
    diag = np.zeros(n)
    diag[:-1] += np.abs(sup)
    diag[1:] += np.abs(sub)
    diag += rng.uniform(0.5, 1.5, n)
    b = rng.standard_normal(n)
    x_np, ok_np = kernels.thomas_numpy(sub, diag, sup, b)
    x_nb, ok_nb = kernels.thomas_numba(sub, diag, sup, b)
    assert ok_np and ok_nb
    assert np.allclose(x_np, x_nb, rtol=1e-14)
    dense = np.diag(diag) + np.diag(sub, -1) + np.diag(sup, 1)
    assert np.allclose(x_np, np.linalg.solve(dense, b), rtol=1e-10)


def test_thomas_reports_singular_pivot():
    x, ok = kernels.thomas_numpy(np.zeros(1), np.array([1e-301, 1.0]),
                                 np.zeros(1), np.ones(2))
    assert not ok


@needs_numba
def test_cg_backends_reach_tolerance():
    indptr, indices, data, dense = random_csr(25, seed=3)
    spd = dense @ dense.T + 25 * np.eye(25)
    indptr2 = [0]
    indices2 = []
    vals = []
    for i in range(25):
        cols = np.nonzero(spd[i])[0]
        indices2.extend(cols)
        vals.extend(spd[i, cols])
        indptr2.append(len(indices2))
    indptr2 = np.array(indptr2, dtype=np.int64)
    indices2 = np.array(indices2, dtype=np.int64)
    vals = np.array(vals)
    b = np.random.default_rng(4).standard_normal(25)
    for impl in (kernels.cg_numpy, kernels.cg_numba):
        x = np.zeros(25)
        iters, relres = impl(indptr2, indices2, vals, b, x, 1e-12, 500)
        assert relres <= 1e-12
        assert np.linalg.norm(spd @ x - b) <= 1e-10 * np.linalg.norm(b)


@needs_numba
def test_scatter_add_backends_agree():
    idx = np.array([0, 2, 2, 1, 0], dtype=np.int64)
    vals = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
    a = kernels.scatter_add_numpy(np.zeros(3), idx, vals)
    b = kernels.scatter_add_numba(np.zeros(3), idx, vals)
    assert np.array_equal(a, b)
    assert np.array_equal(a, [6.0, 4.0, 5.0])


def test_env_flag_selects_numpy_backend():
    env = dict(os.environ, THERMFEM_KERNELS="numpy")
    out = subprocess.run(
        [sys.executable, "-c",
         "from thermfem import kernels; print(kernels.BACKEND)"],
        capture_output=True, text=True, env=env, check=True)
    assert out.stdout.strip() == "numpy"


def test_env_flag_rejects_unknown_value():
    env = dict(os.environ, THERMFEM_KERNELS="gpu")
    out = subprocess.run(
        [sys.executable, "-c", "import thermfem.kernels"],
        capture_output=True, text=True, env=env)
    assert out.returncode != 0


def test_implementations_table():
    impls = kernels.implementations("csr_matvec")
    assert "numpy" in impls
    if kernels.HAVE_NUMBA:
        assert "numba" in impls
    with pytest.raises(KeyError):
        kernels.implementations("fft")
