"""NumPy fallback for the per-element assembly and CSR kernels.

Mirrors the API of the compiled extension ``_core``; selection happens in
``bilotrack._kernels.__init__``. All routines are deterministic: reductions
run in fixed (sorted or contiguous) order.
"""

import numpy as np


def weighted_mass_values(areas, g, lam, w):
    """Per-element weighted mass matrices, row-major (nt, 9).

    Entry ``3*i + j`` of element e is ``sum_q 2*area_e*w_q*g[e,q]*
    lam[q,i]*lam[q,j]``, the quadrature image of ``int_T g phi_i phi_j``.
    """
    basis_outer = np.einsum("q,qi,qj->qij", w, lam, lam)
    vals = np.einsum("eq,qij->eij", g, basis_outer)
    vals *= 2.0 * areas[:, None, None]
    return vals.reshape(len(areas), 9)


def weighted_load_values(areas, g, lam, w):
    """Per-element load vectors (nt, 3): quadrature of ``int_T g phi_i``."""
    vals = g @ (w[:, None] * lam)
    vals *= 2.0 * areas[:, None]
    return vals


def scatter_add(tris, cellvals, nv):
    """Accumulate per-element nodal contributions into a global vector."""
    return np.bincount(tris.ravel(), weights=cellvals.ravel(), minlength=nv)


def matvec_plan(indptr):
    """Auxiliary data for csr_matvec: the row index of every stored entry."""
    n = len(indptr) - 1
    return np.repeat(np.arange(n, dtype=np.int64), np.diff(indptr))


def csr_matvec(plan, indptr, indices, data, x):
    """CSR matrix-vector product using a precomputed row-index plan."""
    n = len(indptr) - 1
    return np.bincount(plan, weights=data * x[indices], minlength=n)
