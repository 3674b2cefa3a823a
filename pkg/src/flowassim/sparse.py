"""Sparse matrix helpers: triplet assembly, direct LU solves, products.

CSR storage and the LU factorization are scipy's (``csr_matrix`` and
SuperLU); this module pins down the contracts the rest of the package
relies on: canonical CSR (sorted, duplicate-free), bounds checking, and a
residual-checked solve that reports singular pivots.
"""
from __future__ import annotations

import numpy as np
import scipy.io
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "SingularMatrixError",
    "to_csr",
    "lu_factor",
    "lu_solve",
    "spmv",
    "transpose_spmv",
    "write_matrix_market",
    "AssemblyPattern",
]


class SingularMatrixError(ArithmeticError):
    """Direct factorization hit a zero pivot.

    ``pivot`` is the index of a row/column known to be empty when that can be
    identified, otherwise ``None``.
    """

    def __init__(self, message, pivot=None):
        super().__init__(message)
        self.pivot = pivot


def to_csr(rows, cols, vals, n_rows: int, n_cols: int) -> sp.csr_matrix:
    """Convert (row, col, value) triplets to canonical CSR, summing duplicates."""
    rows = np.asarray(rows, dtype=np.int64).ravel()
    cols = np.asarray(cols, dtype=np.int64).ravel()
    vals = np.asarray(vals, dtype=float).ravel()
    if not (len(rows) == len(cols) == len(vals)):
        raise ValueError("triplet arrays differ in length")
    if len(rows):
        if rows.min() < 0 or rows.max() >= n_rows:
            raise IndexError(f"row index out of range [0, {n_rows})")
        if cols.min() < 0 or cols.max() >= n_cols:
            raise IndexError(f"column index out of range [0, {n_cols})")
    A = sp.coo_matrix((vals, (rows, cols)), shape=(n_rows, n_cols)).tocsr()
    A.sum_duplicates()
    A.sort_indices()
    return A


def _empty_line(A):
    A = sp.csr_matrix(A)
    nnz_rows = np.diff(A.indptr)
    zero_rows = np.flatnonzero(nnz_rows == 0)
    if len(zero_rows):
        return int(zero_rows[0])
    nnz_cols = np.bincount(A.indices, minlength=A.shape[1])
    zero_cols = np.flatnonzero(nnz_cols == 0)
    if len(zero_cols):
        return int(zero_cols[0])
    return None


class _Factor:
    """LU factors of a square sparse matrix, reusable for A x = b and A^T x = b.

    With ``perm`` (a symmetric fill-reducing permutation, e.g. nested
    dissection) the permuted matrix is factored in that order with threshold
    pivoting; otherwise SuperLU's COLAMD ordering with partial pivoting.
    """

    def __init__(self, A, perm=None):
        A = sp.csc_matrix(A)
        if A.shape[0] != A.shape[1]:
            raise ValueError(f"matrix is not square: {A.shape}")
        A.eliminate_zeros()
        self.A = A
        self._scale = spla.norm(A, np.inf)
        self._perm = None if perm is None else np.asarray(perm, dtype=np.int64)
        try:
            if self._perm is None:
                self._lu = spla.splu(A, permc_spec="COLAMD")
            else:
                if len(self._perm) != A.shape[0]:
                    raise ValueError("permutation length does not match the matrix")
                Ap = A[self._perm][:, self._perm].tocsc()
                self._lu = spla.splu(Ap, permc_spec="NATURAL", diag_pivot_thresh=0.01)
        except RuntimeError as exc:
            pivot = _empty_line(A)
            raise SingularMatrixError(f"singular matrix ({exc}); pivot {pivot}", pivot) from exc

    def _raw_solve(self, b, t):
        if self._perm is None:
            return self._lu.solve(b, trans=t)
        x = np.empty_like(b)
        x[self._perm] = self._lu.solve(b[self._perm], trans=t)
        return x

    @property
    def shape(self):
        return self.A.shape

    def solve(self, b, trans: bool = False, refine: int = 2):
        b = np.asarray(b, dtype=float)
        if b.shape[0] != self.A.shape[0]:
            raise ValueError(f"rhs length {b.shape[0]} != {self.A.shape[0]}")
        t = "T" if trans else "N"
        x = self._raw_solve(b, t)
        A = self.A.T if trans else self.A
        scale = self._scale
        for _ in range(refine):
            r = b - A @ x
            bound = 1e-10 * (scale * np.abs(x).max(initial=0.0) + np.abs(b).max(initial=0.0))
            if np.abs(r).max(initial=0.0) <= bound:
                break
            x = x + self._raw_solve(r, t)
        if not np.all(np.isfinite(x)):
            raise SingularMatrixError("non-finite solution: numerically singular matrix")
        return x


def lu_factor(A, perm=None) -> _Factor:
    return _Factor(A, perm)


def lu_solve(A, b) -> np.ndarray:
    """Solve ``A x = b`` by sparse LU with partial pivoting on a COLAMD ordering."""
    return _Factor(A).solve(b)


def spmv(A, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[0] != A.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape} @ {x.shape}")
    return A @ x


def transpose_spmv(A, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[0] != A.shape[0]:
        raise ValueError(f"dimension mismatch: {A.shape}^T @ {x.shape}")
    return A.T @ x


def write_matrix_market(path, A, comment: str = "") -> None:
    scipy.io.mmwrite(str(path), sp.coo_matrix(A), comment=comment)


class AssemblyPattern:
    """Fixed CSR sparsity for repeated element-by-element assembly.

    ``local_dofs`` has shape (n_elements, m): the global index of each local
    degree of freedom.  After construction, :meth:`matrix` turns an
    (n_elements, m, m) array of element matrices into a CSR matrix with a
    fixed structure by one ``bincount``.
    """

    def __init__(self, local_dofs: np.ndarray, n: int):
        self.n = n
        ld = np.asarray(local_dofs, dtype=np.int64)
        m = ld.shape[1]
        rows = np.repeat(ld, m, axis=1).ravel()
        cols = np.tile(ld, (1, m)).ravel()
        keys = rows * n + cols
        uniq, inverse = np.unique(keys, return_inverse=True)
        self._map = inverse.ravel()
        self.nnz = len(uniq)
        urows = uniq // n
        self.indices = (uniq % n).astype(np.int32)
        self.indptr = np.concatenate([[0], np.cumsum(np.bincount(urows, minlength=n))]).astype(np.int32)
        self._diag = np.full(n, -1, dtype=np.int64)
        is_diag = urows == self.indices
        self._diag[urows[is_diag]] = np.flatnonzero(is_diag)
        self._row_of = urows

    def matrix(self, element_matrices: np.ndarray, identity_rows=None) -> sp.csr_matrix:
        data = np.bincount(self._map, weights=element_matrices.ravel(), minlength=self.nnz)
        if identity_rows is not None and len(identity_rows):
            mask = np.zeros(self.n, dtype=bool)
            mask[identity_rows] = True
            data[mask[self._row_of]] = 0.0
            diag = self._diag[identity_rows]
            if (diag < 0).any():
                raise ValueError("constrained dof without a diagonal entry")
            data[diag] = 1.0
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.n, self.n))
