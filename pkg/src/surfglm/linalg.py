"""Sparse symmetric positive-definite factorizations.

Two backends sit behind :class:`SparseCholesky`:

* CHOLMOD (``scikit-sparse``) when importable, the fast path.
* SuperLU from SciPy run in symmetric mode with diagonal pivoting disabled,
  so that ``P A P' = L D L'`` can be read off its ``L`` and ``U`` factors.

Both reuse a fill-reducing ordering computed once per sparsity pattern
(:class:`Symbolic`), which is what makes repeated refactorization inside
the EM loop and the kappa^2 line search cheap.
"""
from __future__ import annotations

import warnings
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

try:  # pragma: no cover - availability depends on the environment
    from sksparse import cholmod as _cholmod
except ImportError:  # pragma: no cover
    _cholmod = None

HAVE_CHOLMOD = _cholmod is not None


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Raised when a factorization reveals a non-SPD matrix."""


def default_backend() -> str:
    return "cholmod" if HAVE_CHOLMOD else "superlu"


def _as_csc(A) -> sp.csc_matrix:
    A = sp.csc_matrix(A, dtype=float)
    A.sort_indices()
    return A


class Symbolic:
    """Reusable ordering / symbolic analysis for one sparsity pattern."""

    def __init__(self, A, backend: str | None = None):
        self.backend = backend or default_backend()
        A = _as_csc(A)
        self.shape = A.shape
        if self.backend == "cholmod":
            if not HAVE_CHOLMOD:
                raise RuntimeError("CHOLMOD backend requested but scikit-sparse is not installed")
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                try:
                    self._analysis = _cholmod.analyze(A, mode="simplicial", ordering_method="metis")
                except _cholmod.CholmodError:
                    self._analysis = _cholmod.analyze(A, mode="simplicial", ordering_method="amd")
            self.perm = None
        elif self.backend == "superlu":
            lu = spla.splu(
                A,
                permc_spec="MMD_AT_PLUS_A",
                diag_pivot_thresh=0.0,
                options={"SymmetricMode": True},
            )
            self.perm = lu.perm_c.copy()
            self._analysis = None
        else:
            raise ValueError(f"unknown backend {self.backend!r}")

    def factor(self, A) -> "SparseCholesky":
        return SparseCholesky(A, symbolic=self)


class SparseCholesky:
    """Numeric Cholesky-type factorization ``A = P' L L' P`` of a sparse SPD matrix.

    Parameters
    ----------
    A : sparse matrix
        Symmetric positive definite.
    symbolic : Symbolic, optional
        Analysis of a matrix with the same (or a superset) pattern. Built
        on the fly when omitted.
    """

    def __init__(self, A, symbolic: Symbolic | None = None, backend: str | None = None):
        A = _as_csc(A)
        if symbolic is None:
            symbolic = Symbolic(A, backend=backend)
        if symbolic.shape != A.shape:
            raise ValueError("symbolic analysis does not match matrix shape")
        self.symbolic = symbolic
        self.n = A.shape[0]
        if symbolic.backend == "cholmod":
            self._init_cholmod(A)
        else:
            self._init_superlu(A)

    # -- backends ---------------------------------------------------------
    def _init_cholmod(self, A):
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                self._f = self.symbolic._analysis.cholesky(A)
        except _cholmod.CholmodNotPositiveDefiniteError as exc:
            raise NotPositiveDefiniteError(str(exc)) from exc
        d = self._f.D()
        if not np.all(d > 0):
            raise NotPositiveDefiniteError("non-positive pivot in LDL' factorization")
        self._logdet = float(np.sum(np.log(d)))

    def _init_superlu(self, A):
        p = self.symbolic.perm
        Ap = A[p][:, p].tocsc()
        lu = spla.splu(
            Ap,
            permc_spec="NATURAL",
            diag_pivot_thresh=0.0,
            options={"SymmetricMode": True},
        )
        if not np.array_equal(lu.perm_r, np.arange(self.n)):
            raise NotPositiveDefiniteError("row pivoting occurred; matrix is not SPD")
        d = lu.U.diagonal()
        if not np.all(d > 0):
            raise NotPositiveDefiniteError("non-positive pivot in LU factorization")
        self._lu = lu
        self._d = d
        self._L = lu.L.tocsr()
        self._logdet = float(np.sum(np.log(d)))

    # -- public API -------------------------------------------------------
    def logdet(self) -> float:
        """log|A| as the sum of log pivots."""
        return self._logdet

    def solve(self, b) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        if self.symbolic.backend == "cholmod":
            return self._f.solve_A(b)
        p = self.symbolic.perm
        out = np.empty_like(b)
        out[p] = self._lu.solve(np.ascontiguousarray(b[p]))
        return out

    def solve_lt(self, z) -> np.ndarray:
        """Return ``x`` with ``Cov(x) = A^{-1}`` when ``z`` is standard normal.

        Computes ``P' L^{-T} z`` for the factor ``P A P' = L L'``.
        """
        z = np.asarray(z, dtype=float)
        if self.symbolic.backend == "cholmod":
            x = self._f.solve_Lt(z, use_LDLt_decomposition=False)
            return self._f.apply_Pt(x)
        scale = 1.0 / np.sqrt(self._d)
        rhs = z * (scale[:, None] if z.ndim == 2 else scale)
        x = spla.spsolve_triangular(self._L.T.tocsr(), rhs, lower=False, unit_diagonal=True)
        out = np.empty_like(x)
        out[self.symbolic.perm] = x
        return out


def factorize(A, backend: str | None = None) -> SparseCholesky:
    return SparseCholesky(A, backend=backend)


def log_det(A, backend: str | None = None) -> float:
    """Log-determinant of a sparse SPD matrix (or a factor / precision operator)."""
    if isinstance(A, SparseCholesky):
        return A.logdet()
    if hasattr(A, "matrix"):
        A = A.matrix()
    return factorize(A, backend=backend).logdet()


class PatternSum:
    """Weighted sums of fixed sparse matrices on one stable union pattern.

    ``combine(w)`` returns ``sum_i w[i] * mats[i]`` as a CSC matrix whose
    ``indptr``/``indices`` never change, even when some weights are zero or
    entries cancel. This keeps one symbolic analysis valid for every weight
    vector.
    """

    def __init__(self, mats):
        mats = [_as_csc(M) for M in mats]
        shape = mats[0].shape
        if any(M.shape != shape for M in mats):
            raise ValueError("all matrices must share a shape")
        pattern = sum((abs(M) for M in mats), sp.csc_matrix(shape))
        pattern = _as_csc(pattern)
        pattern.data[:] = 1.0
        self.shape = shape
        self.indptr = pattern.indptr.copy()
        self.indices = pattern.indices.copy()
        keys = self._keys(pattern)
        self._maps = []
        self._data = []
        for M in mats:
            pos = np.searchsorted(keys, self._keys(M))
            self._maps.append(pos)
            self._data.append(M.data.copy())
        self.nnz = len(self.indices)

    def _keys(self, M):
        cols = np.repeat(np.arange(M.shape[1], dtype=np.int64), np.diff(M.indptr))
        return cols * M.shape[0] + M.indices.astype(np.int64)

    def combine(self, weights) -> sp.csc_matrix:
        data = np.zeros(self.nnz)
        for w, pos, vals in zip(weights, self._maps, self._data):
            if w != 0.0:
                np.add.at(data, pos, w * vals)
        return sp.csc_matrix((data, self.indices, self.indptr), shape=self.shape)


def write_triplets(path, A) -> None:
    """Write a sparse matrix as ``i j value`` lines (0-based)."""
    A = sp.coo_matrix(A)
    with open(Path(path), "w") as fh:
        fh.write(f"triplets {A.shape[0]} {A.shape[1]} {A.nnz}\n")
        for i, j, v in zip(A.row, A.col, A.data):
            fh.write(f"{i} {j} {float(v)!r}\n")


def read_triplets(path) -> sp.csc_matrix:
    with open(Path(path)) as fh:
        header = fh.readline().split()
        if len(header) != 4 or header[0] != "triplets":
            raise ValueError(f"{path}: bad triplet header")
        nr, nc, nnz = map(int, header[1:])
        body = np.loadtxt(fh, ndmin=2) if nnz else np.zeros((0, 3))
    if body.shape[0] != nnz:
        raise ValueError(f"{path}: expected {nnz} entries, got {body.shape[0]}")
    return sp.csc_matrix(
        (body[:, 2], (body[:, 0].astype(int), body[:, 1].astype(int))), shape=(nr, nc)
    )
