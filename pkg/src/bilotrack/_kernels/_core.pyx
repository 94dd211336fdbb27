# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: per-element quadrature assembly and CSR matvec.

Same API as the NumPy fallback ``bilotrack._kernels.pure``.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def weighted_mass_values(double[::1] areas, double[:, ::1] g,
                         double[:, ::1] lam, double[::1] w):
    """Per-element weighted mass matrices, row-major (nt, 9)."""
    cdef Py_ssize_t nt = areas.shape[0]
    cdef Py_ssize_t nq = w.shape[0]
    out_arr = np.zeros((nt, 9), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t e, q, i, j
    cdef double coeff, li
    for e in range(nt):
        for q in range(nq):
            coeff = 2.0 * areas[e] * w[q] * g[e, q]
            for i in range(3):
                li = coeff * lam[q, i]
                for j in range(3):
                    out[e, 3 * i + j] += li * lam[q, j]
    return out_arr


def weighted_load_values(double[::1] areas, double[:, ::1] g,
                         double[:, ::1] lam, double[::1] w):
    """Per-element load vectors (nt, 3)."""
    cdef Py_ssize_t nt = areas.shape[0]
    cdef Py_ssize_t nq = w.shape[0]
    out_arr = np.zeros((nt, 3), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t e, q, i
    cdef double coeff
    for e in range(nt):
        for q in range(nq):
            coeff = 2.0 * areas[e] * w[q] * g[e, q]
            for i in range(3):
                out[e, i] += coeff * lam[q, i]
    return out_arr


def scatter_add(long[:, ::1] tris, double[:, ::1] cellvals, Py_ssize_t nv):
    """Accumulate per-element nodal contributions into a global vector."""
    cdef Py_ssize_t nt = tris.shape[0]
    out_arr = np.zeros(nv, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t e, i
    for e in range(nt):
        for i in range(3):
            out[tris[e, i]] += cellvals[e, i]
    return out_arr


def matvec_plan(indptr):
    """The compiled matvec iterates rows directly; no plan is needed."""
    return None


def csr_matvec(plan, long[::1] indptr, long[::1] indices,
               double[::1] data, double[::1] x):
    """CSR matrix-vector product."""
    cdef Py_ssize_t n = indptr.shape[0] - 1
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, k
    cdef double acc
    for i in range(n):
        acc = 0.0
        for k in range(indptr[i], indptr[i + 1]):
            acc += data[k] * x[indices[k]]
        out[i] = acc
    return out_arr
