"""Symmetric CSR matrices with tridiagonal and conjugate-gradient solvers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels


class SolverError(RuntimeError):
    """Base class for linear solver failures."""


class NotConvergedError(SolverError):
    pass


class SingularPivotError(SolverError):
    pass


@dataclass
class LinearSolveOptions:
    """How to solve M x = b.

    ``tridiagonal`` runs Thomas elimination and requires bandwidth <= 1;
    ``conjugate_gradient`` runs plain CG down to a relative residual of
    ``rel_tolerance``.  ``max_iterations`` defaults to 10 * n.
    """

    method: str = "conjugate_gradient"
    rel_tolerance: float = 1e-12
    max_iterations: int | None = None

    def __post_init__(self):
        if self.method not in ("tridiagonal", "conjugate_gradient"):
            raise ValueError(f"unknown solve method {self.method!r}")
        if self.rel_tolerance <= 0:
            raise ValueError("rel_tolerance must be positive")
        if self.max_iterations is not None and self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")


class CsrMatrix:
    """Square sparse matrix in compressed sparse row format.

    Column indices are strictly increasing within each row.  When
    ``symmetric`` is set the matrix is asserted (and, when built through
    :meth:`from_coo`, enforced by averaging with its transpose) to be
    symmetric.  Instances are immutable after construction; ``matvec``
    is pure and safe to call concurrently.
    """

    def __init__(self, n, indptr, indices, data, symmetric=False):
        self.n = int(n)
        self.indptr = np.ascontiguousarray(indptr, dtype=np.int64)
        self.indices = np.ascontiguousarray(indices, dtype=np.int64)
        self.data = np.ascontiguousarray(data, dtype=float)
        self.symmetric = bool(symmetric)
        if self.indptr.shape[0] != self.n + 1:
            raise ValueError("indptr length must be n + 1")
        if self.indices.shape[0] != self.data.shape[0]:
            raise ValueError("indices and data lengths differ")

    @classmethod
    def from_coo(cls, n, rows, cols, vals, symmetric=False):
        """Build from coordinate triplets; duplicate entries are summed.

        For ``symmetric`` matrices the sparsity pattern must be
        structurally symmetric; values are averaged with the transpose
        to remove rounding drift from assembly.
        """
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=float)
        if rows.size and (rows.min() < 0 or rows.max() >= n
                          or cols.min() < 0 or cols.max() >= n):
            raise ValueError("coordinate index out of range")
        key = rows * n + cols
        uniq, inv = np.unique(key, return_inverse=True)
        data = np.zeros(uniq.shape[0])
        np.add.at(data, inv, vals)
        urows = uniq // n
        ucols = uniq % n
        indptr = np.searchsorted(urows, np.arange(n + 1))
        mat = cls(n, indptr, ucols, data, symmetric=symmetric)
        if symmetric:
            perm = mat.transpose_permutation()
            mat.data = 0.5 * (mat.data + mat.data[perm])
        return mat

    @property
    def nnz(self) -> int:
        return self.data.shape[0]

    def row_of_entry(self) -> np.ndarray:
        return np.repeat(np.arange(self.n), np.diff(self.indptr))

    def transpose_permutation(self) -> np.ndarray:
        """Permutation p with (rows, cols)[p[k]] == (cols, rows)[k].

        Requires a structurally symmetric pattern.
        """
        rows = self.row_of_entry()
        key = rows * self.n + self.indices
        tkey = self.indices * self.n + rows
        perm = np.searchsorted(key, tkey)
        if perm.size and (perm.max() >= key.size
                          or not np.array_equal(key[perm], tkey)):
            raise ValueError("sparsity pattern is not symmetric")
        return perm

    def matvec(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n,):
            raise ValueError(f"dimension mismatch: matrix is {self.n}, "
                             f"vector is {x.shape}")
        return kernels.csr_matvec(self.indptr, self.indices, self.data, x)

    def __matmul__(self, x):
        return self.matvec(x)

    def diagonal(self) -> np.ndarray:
        diag = np.zeros(self.n)
        rows = self.row_of_entry()
        on_diag = rows == self.indices
        diag[rows[on_diag]] = self.data[on_diag]
        return diag

    def bandwidth(self) -> int:
        if self.nnz == 0:
            return 0
        return int(np.abs(self.row_of_entry() - self.indices).max())

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.n, self.n))
        dense[self.row_of_entry(), self.indices] = self.data
        return dense

    def symmetry_error(self) -> float:
        """Max relative asymmetry |a_ij - a_ji| / max|a|."""
        perm = self.transpose_permutation()
        scale = np.abs(self.data).max() if self.nnz else 0.0
        if scale == 0.0:
            return 0.0
        return float(np.abs(self.data - self.data[perm]).max() / scale)

    def dump_coo(self, stream) -> None:
        """Write ``i j value`` lines (debugging aid)."""
        rows = self.row_of_entry()
        for i, j, v in zip(rows, self.indices, self.data):
            stream.write(f"{int(i)} {int(j)} {v:.17g}\n")


def _tridiagonal_bands(mat: CsrMatrix):
    rows = mat.row_of_entry()
    offs = mat.indices - rows
    if np.any(np.abs(offs) > 1):
        raise ValueError("matrix bandwidth exceeds 1; tridiagonal solve "
                         "is not applicable")
    n = mat.n
    sub = np.zeros(max(n - 1, 0))
    diag = np.zeros(n)
    sup = np.zeros(max(n - 1, 0))
    diag[rows[offs == 0]] = mat.data[offs == 0]
    sup_rows = rows[offs == 1]
    sup[sup_rows] = mat.data[offs == 1]
    sub_rows = rows[offs == -1]
    sub[sub_rows - 1] = mat.data[offs == -1]
    return sub, diag, sup


def solve(mat: CsrMatrix, b: np.ndarray,
          opts: LinearSolveOptions | None = None) -> np.ndarray:
    """Solve the SPD system mat x = b.

    Thomas elimination is exact up to rounding; CG stops once the true
    relative residual meets ``rel_tolerance``.
    """
    if opts is None:
        opts = LinearSolveOptions()
    b = np.asarray(b, dtype=float)
    if b.shape != (mat.n,):
        raise ValueError(f"dimension mismatch: matrix is {mat.n}, "
                         f"rhs is {b.shape}")
    if not mat.symmetric:
        raise ValueError("solve expects a matrix flagged symmetric (SPD)")
    if mat.n and np.any(mat.diagonal() <= 0):
        raise ValueError("solve expects a positive diagonal (SPD)")

    if opts.method == "tridiagonal":
        sub, diag, sup = _tridiagonal_bands(mat)
        x, ok = kernels.thomas_solve(sub, diag, sup, b)
        if not ok:
            raise SingularPivotError("tridiagonal pivot below 1e-300")
        return x

    maxit = opts.max_iterations if opts.max_iterations is not None else 10 * mat.n
    x = np.zeros(mat.n)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return x
    used = 0
    while used < maxit:
        it, _ = kernels.cg_solve(mat.indptr, mat.indices, mat.data, b, x,
                                 opts.rel_tolerance, maxit - used)
        used += max(int(it), 1)
        true_res = float(np.linalg.norm(b - mat.matvec(x))) / bnorm
        if true_res <= opts.rel_tolerance:
            return x
    raise NotConvergedError(
        f"CG did not reach rel_tolerance={opts.rel_tolerance:g} "
        f"within {maxit} iterations")
