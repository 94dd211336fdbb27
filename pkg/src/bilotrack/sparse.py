"""Sparse symmetric storage, triplet assembly, and the linear solvers.

Assembly is order-independent by construction: triplets are sorted by
(row, col, value) before duplicates are summed, so shuffled input produces
bit-identical matrices. The SPD solver is Jacobi-preconditioned conjugate
gradients with a fixed, deterministic reduction order.
"""

import numpy as np

from . import _kernels
from .errors import NoConvergenceError, SingularMatrixError

__all__ = [
    "SparseMatrix",
    "TripletPattern",
    "assemble_from_triplets",
    "solve_spd",
    "solve_direct",
    "write_matrix_market",
]


class SparseMatrix:
    """Compressed-sparse-row matrix, immutable after construction.

    ``symmetric=True`` tags the matrix as symmetric; the tag is verified at
    construction (max-norm asymmetry at most 1e-12 times the max entry) and
    required by solve_spd.
    """

    def __init__(self, dim, indptr, indices, data, symmetric=False):
        self.dim = int(dim)
        self.indptr = np.ascontiguousarray(indptr, dtype=np.int64)
        self.indices = np.ascontiguousarray(indices, dtype=np.int64)
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.symmetric = bool(symmetric)
        if len(self.indptr) != self.dim + 1:
            raise ValueError("indptr length must be dim + 1")
        self._plan = _kernels.matvec_plan(self.indptr)
        if self.symmetric:
            asym = self._max_asymmetry()
            scale = np.abs(self.data).max(initial=0.0)
            if asym > 1e-12 * max(scale, 1e-300):
                raise ValueError(
                    "matrix tagged symmetric but |A - A^T|_max = %.3e" % asym
                )

    def _max_asymmetry(self):
        at = self.transpose()
        if not np.array_equal(at.indptr, self.indptr) or not np.array_equal(
            at.indices, self.indices
        ):
            # differing sparsity pattern: compare via the union pattern
            diff = np.abs(self.to_dense() - self.to_dense().T)
            return diff.max(initial=0.0)
        return np.abs(at.data - self.data).max(initial=0.0)

    @property
    def nnz(self):
        return len(self.data)

    def matvec(self, x):
        x = np.ascontiguousarray(x, dtype=np.float64)
        return _kernels.csr_matvec(self._plan, self.indptr, self.indices, self.data, x)

    __matmul__ = matvec

    def diagonal(self):
        rows = np.repeat(np.arange(self.dim, dtype=np.int64), np.diff(self.indptr))
        hit = rows == self.indices
        out = np.zeros(self.dim)
        out[rows[hit]] = self.data[hit]
        return out

    def transpose(self):
        rows = np.repeat(np.arange(self.dim, dtype=np.int64), np.diff(self.indptr))
        return assemble_from_triplets(
            self.dim, self.indices, rows, self.data, symmetric=False
        )

    def to_dense(self):
        out = np.zeros((self.dim, self.dim))
        rows = np.repeat(np.arange(self.dim, dtype=np.int64), np.diff(self.indptr))
        out[rows, self.indices] = self.data
        return out

    def to_scipy(self):
        from scipy.sparse import csr_matrix

        return csr_matrix(
            (self.data, self.indices, self.indptr), shape=(self.dim, self.dim)
        )

    def add_scaled(self, other, factor=1.0, symmetric=None):
        """A + factor*B for matrices with identical sparsity pattern."""
        if not np.array_equal(other.indptr, self.indptr) or not np.array_equal(
            other.indices, self.indices
        ):
            raise ValueError("add_scaled requires an identical sparsity pattern")
        sym = self.symmetric and other.symmetric if symmetric is None else symmetric
        return SparseMatrix(
            self.dim,
            self.indptr,
            self.indices,
            self.data + factor * other.data,
            symmetric=sym,
        )


def _canonical_order(rows, cols, vals):
    # sort by (row, col, value): duplicate entries are then summed in a
    # canonical order, making assembly bit-identical under input shuffles
    perm = np.lexsort((vals, cols, rows))
    return rows[perm], cols[perm], vals[perm]


def assemble_from_triplets(dim, rows, cols=None, vals=None, symmetric=False):
    """Build a SparseMatrix from triplets, summing duplicates.

    Accepts either three parallel arrays (rows, cols, vals) or a single
    iterable of (row, col, value) tuples. Out-of-range indices raise
    ValueError.
    """
    if cols is None:
        trips = list(rows)
        if trips:
            arr = np.asarray(trips, dtype=np.float64)
            rows = arr[:, 0].astype(np.int64)
            cols = arr[:, 1].astype(np.int64)
            vals = arr[:, 2]
        else:
            rows = np.empty(0, dtype=np.int64)
            cols = np.empty(0, dtype=np.int64)
            vals = np.empty(0)
    else:
        rows = np.ascontiguousarray(rows, dtype=np.int64)
        cols = np.ascontiguousarray(cols, dtype=np.int64)
        vals = np.ascontiguousarray(vals, dtype=np.float64)
    if len(rows) and (
        rows.min() < 0 or cols.min() < 0 or rows.max() >= dim or cols.max() >= dim
    ):
        raise ValueError("triplet index out of range for dimension %d" % dim)

    rows, cols, vals = _canonical_order(rows, cols, vals)
    keys = rows * dim + cols
    unique_mask = np.empty(len(keys), dtype=bool)
    if len(keys):
        unique_mask[0] = True
        np.not_equal(keys[1:], keys[:-1], out=unique_mask[1:])
    starts = np.flatnonzero(unique_mask)
    urows = rows[starts]
    ucols = cols[starts]
    uvals = np.add.reduceat(vals, starts) if len(starts) else np.empty(0)

    indptr = np.zeros(dim + 1, dtype=np.int64)
    np.add.at(indptr, urows + 1, 1)
    np.cumsum(indptr, out=indptr)
    return SparseMatrix(dim, indptr, ucols, uvals, symmetric=symmetric)


class TripletPattern:
    """Frozen triplet layout enabling repeated assembly of new values.

    The (row, col) pattern is sorted and deduplicated once; ``assemble``
    then only permutes and segment-sums the value array. Used for operators
    reassembled every Newton iterate on a fixed mesh.
    """

    def __init__(self, dim, rows, cols):
        rows = np.ascontiguousarray(rows, dtype=np.int64)
        cols = np.ascontiguousarray(cols, dtype=np.int64)
        if len(rows) and (
            rows.min() < 0 or cols.min() < 0 or rows.max() >= dim or cols.max() >= dim
        ):
            raise ValueError("triplet index out of range for dimension %d" % dim)
        if len(rows) == 0:
            raise ValueError("TripletPattern requires at least one triplet")
        self.dim = int(dim)
        self.perm = np.lexsort((cols, rows))
        rows = rows[self.perm]
        cols = cols[self.perm]
        keys = rows * dim + cols
        unique_mask = np.empty(len(keys), dtype=bool)
        unique_mask[0] = True
        np.not_equal(keys[1:], keys[:-1], out=unique_mask[1:])
        self.starts = np.flatnonzero(unique_mask)
        self.indices = cols[self.starts]
        self.indptr = np.zeros(dim + 1, dtype=np.int64)
        np.add.at(self.indptr, rows[self.starts] + 1, 1)
        np.cumsum(self.indptr, out=self.indptr)

    def assemble(self, vals, symmetric=True):
        vals = np.ascontiguousarray(vals, dtype=np.float64).ravel()[self.perm]
        data = np.add.reduceat(vals, self.starts)
        return SparseMatrix(
            self.dim, self.indptr, self.indices, data, symmetric=symmetric
        )


def solve_spd(A, rhs, tol=1e-12, max_iter=20000):
    """Jacobi-preconditioned conjugate gradients for SPD systems.

    Returns x with ``|A x - rhs|_2 <= tol * |rhs|_2`` (true residual,
    re-checked on exit). Deterministic for fixed inputs. Raises
    NoConvergenceError with the final residual if the budget runs out.
    """
    if not A.symmetric:
        raise ValueError("solve_spd requires a matrix tagged symmetric")
    rhs = np.ascontiguousarray(rhs, dtype=np.float64)
    rhs_norm = float(np.linalg.norm(rhs))
    if rhs_norm == 0.0:
        return np.zeros(A.dim)
    diag = A.diagonal()
    if np.any(diag <= 0.0):
        raise ValueError("matrix has a nonpositive diagonal entry; not SPD")
    inv_diag = 1.0 / diag

    x = np.zeros(A.dim)
    r = rhs.copy()
    z = inv_diag * r
    p = z.copy()
    rz = float(r @ z)
    target = tol * rhs_norm
    best = np.inf
    since_best = 0
    for _ in range(max_iter):
        Ap = A.matvec(p)
        pAp = float(p @ Ap)
        if pAp <= 0.0:
            raise ValueError("encountered nonpositive curvature; matrix not SPD")
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        res = float(np.linalg.norm(r))
        if res <= target:
            true_r = rhs - A.matvec(x)
            if np.linalg.norm(true_r) <= target:
                return x
            r = true_r  # recurrence drifted; continue with the true residual
            res = float(np.linalg.norm(r))
        if res < 0.999 * best:
            best, since_best = res, 0
        else:
            since_best += 1
            if since_best > 1000:  # rounding floor reached, stop burning cycles
                break
        z = inv_diag * r
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise NoConvergenceError(
        "CG failed to reach %.2e after %d iterations (residual %.3e)"
        % (target, max_iter, float(np.linalg.norm(r))),
        residual=float(np.linalg.norm(r)),
    )


def solve_direct(A, rhs):
    """Sparse LU solve for nonsingular systems (Newton fallback path)."""
    import warnings

    from scipy.sparse.linalg import MatrixRankWarning, spsolve

    rhs = np.ascontiguousarray(rhs, dtype=np.float64)
    with warnings.catch_warnings():
        warnings.simplefilter("error", MatrixRankWarning)
        try:
            x = spsolve(A.to_scipy().tocsc(), rhs)
        except (MatrixRankWarning, RuntimeError) as exc:
            raise SingularMatrixError(
                "matrix is singular to working precision"
            ) from exc
    if not np.all(np.isfinite(x)):
        raise SingularMatrixError("matrix is singular to working precision")
    return x


def write_matrix_market(A, path, comment="bilotrack matrix dump"):
    """Dump in MatrixMarket coordinate format (1-based indices)."""
    rows = np.repeat(np.arange(A.dim, dtype=np.int64), np.diff(A.indptr))
    with open(path, "w") as fh:
        fh.write("%%MatrixMarket matrix coordinate real general\n")
        fh.write("%% " + comment + "\n")
        fh.write("%d %d %d\n" % (A.dim, A.dim, A.nnz))
        for i, j, v in zip(rows, A.indices, A.data):
            fh.write("%d %d %s\n" % (i + 1, j + 1, format(v, ".17g")))
