"""Sparse storage, direct solves and weighted inner products.

Matrices are plain :class:`scipy.sparse.csr_matrix` objects kept in canonical
form (sorted column indices, no duplicates).  :func:`as_csr` is the single
entry point that enforces this; everything downstream assumes it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.io
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DimensionMismatch, SingularMatrix

PIVOT_THRESHOLD = 1e-14
# SuperLU settings: minimum-degree on A^T + A suits the (structurally symmetric)
# saddle-point systems. Static diagonal pivoting first, threshold pivoting as fallback.
_PERMC = "MMD_AT_PLUS_A"
_DIAG_PIVOT = 0.1
_STATIC_PIVOT = 0.0
RESIDUAL_TARGET = 1e-12
ACCEPT_RESIDUAL = 1e-10  # worse than this after refinement triggers a pivoting refactor


def as_csr(A) -> sp.csr_matrix:
    """Return ``A`` as a canonical CSR matrix of float64."""
    A = sp.csr_matrix(A, dtype=np.float64, copy=False)
    if not A.has_canonical_format:
        A = A.copy()
        A.sum_duplicates()
    return A


def check_csr(A: sp.csr_matrix, symmetric: bool = False, samples: int = 200, seed: int = 0) -> None:
    """Validate the structural invariants of a CSR matrix.

    Raises ``ValueError`` on the first violated invariant.  With
    ``symmetric=True`` a random sample of stored entries is compared against
    the transposed entry.
    """
    nrows, ncols = A.shape
    ptr, idx = A.indptr, A.indices
    if len(ptr) != nrows + 1 or ptr[0] != 0 or np.any(np.diff(ptr) < 0):
        raise ValueError("row offsets must be nondecreasing with length nrows+1")
    if idx.size and (idx.min() < 0 or idx.max() >= ncols):
        raise ValueError("column index out of range")
    for r in range(nrows):
        cols = idx[ptr[r]:ptr[r + 1]]
        if cols.size > 1 and np.any(np.diff(cols) <= 0):
            raise ValueError(f"row {r}: column indices not strictly increasing")
    if symmetric and A.nnz:
        rng = np.random.default_rng(seed)
        rows = np.repeat(np.arange(nrows), np.diff(ptr))
        pick = rng.choice(A.nnz, size=min(samples, A.nnz), replace=False)
        scale = np.abs(A.data).max()
        aij = A.data[pick]
        aji = np.asarray(A[idx[pick], rows[pick]]).ravel()
        if np.any(np.abs(aij - aji) > 1e-12 * scale):
            raise ValueError("matrix flagged symmetric is not symmetric")


class Factorization:
    """Sparse LU factors of a square matrix.

    The first attempt keeps SuperLU on the diagonal (static pivoting), so the
    fill is fixed by the symmetric ordering no matter how wild the values are.
    If a pivot looks singular, or refinement cannot reach the residual target,
    the matrix is refactored with threshold partial pivoting.
    """

    def __init__(self, A):
        A = as_csr(A)
        n, m = A.shape
        if n != m:
            raise DimensionMismatch(f"factorize needs a square matrix, got {A.shape}")
        self.shape = A.shape
        self.scale = float(np.abs(A.data).max()) if A.nnz else 0.0
        if self.scale == 0.0:
            raise SingularMatrix("zero matrix")
        self._A = A
        self._csc = A.tocsc()
        self.pivoting = False
        try:
            self._lu = self._factor(_STATIC_PIVOT)
        except SingularMatrix:
            self._lu = self._factor(_DIAG_PIVOT)
            self.pivoting = True

    def _factor(self, thresh: float):
        try:
            lu = spla.splu(self._csc, permc_spec=_PERMC, diag_pivot_thresh=thresh)
        except RuntimeError as exc:
            raise SingularMatrix(str(exc)) from exc
        pivots = np.abs(lu.U.diagonal())
        if pivots.min() <= PIVOT_THRESHOLD * self.scale:
            raise SingularMatrix(
                f"pivot {pivots.min():.3e} below {PIVOT_THRESHOLD:g} * max|A| = "
                f"{PIVOT_THRESHOLD * self.scale:.3e}"
            )
        return lu

    def _refined(self, b: np.ndarray, bnorm: float) -> tuple[np.ndarray, float]:
        x = self._lu.solve(b)
        for _ in range(3):
            r = b - self._A @ x
            rn = float(np.linalg.norm(r))
            if rn <= RESIDUAL_TARGET * bnorm:
                return x, rn
            x = x + self._lu.solve(r)
        return x, float(np.linalg.norm(b - self._A @ x))

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=np.float64)
        if b.shape[0] != self.shape[0]:
            raise DimensionMismatch(f"rhs length {b.shape[0]} != {self.shape[0]}")
        bnorm = float(np.linalg.norm(b))
        x, rn = self._refined(b, bnorm)
        if rn > ACCEPT_RESIDUAL * bnorm and not self.pivoting:
            self._lu = self._factor(_DIAG_PIVOT)
            self.pivoting = True
            x, rn = self._refined(b, bnorm)
        if not np.isfinite(rn):
            raise SingularMatrix("solve produced non-finite values")
        return x


def factorize(A) -> Factorization:
    return Factorization(A)


def solve(fact: Factorization, b: np.ndarray) -> np.ndarray:
    return fact.solve(b)


@dataclass(frozen=True)
class InnerProduct:
    """``(v, w)_* = v[mask]^T gram w[mask]`` for a symmetric PSD ``gram``.

    ``mask`` selects the active entries of full coefficient vectors; entries
    outside it do not contribute.  ``mask=None`` means all entries.
    """

    gram: sp.csr_matrix
    mask: np.ndarray | None = None
    size: int | None = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "gram", as_csr(self.gram))
        if self.mask is not None:
            mask = np.asarray(self.mask, dtype=np.intp)
            object.__setattr__(self, "mask", mask)
            if len(mask) != self.gram.shape[0]:
                raise DimensionMismatch("mask length must equal gram dimension")

    def _restrict(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if self.mask is None:
            if v.shape[0] != self.gram.shape[0]:
                raise DimensionMismatch(f"vector length {v.shape[0]} != {self.gram.shape[0]}")
            return v
        if self.size is not None and v.shape[0] != self.size:
            raise DimensionMismatch(f"vector length {v.shape[0]} != {self.size}")
        return v[self.mask]

    def __call__(self, v: np.ndarray, w: np.ndarray) -> float:
        vm, wm = self._restrict(v), self._restrict(w)
        return float(vm @ (self.gram @ wm))

    def apply(self, v: np.ndarray) -> np.ndarray:
        """Gram matrix applied to the restricted vector (a dual vector on the mask)."""
        return self.gram @ self._restrict(v)

    def norm(self, v: np.ndarray) -> float:
        return ip_norm(v, self)


def euclidean(n: int) -> InnerProduct:
    return InnerProduct(sp.identity(n, format="csr"))


def ip_norm(v: np.ndarray, ip: InnerProduct) -> float:
    """``sqrt(v^T gram v)`` on the active entries; tiny negative round-off clips to 0."""
    return float(np.sqrt(max(ip(v, v), 0.0)))


def dump_matrix_market(A, path) -> None:
    scipy.io.mmwrite(str(path), as_csr(A), field="real", symmetry="general")
