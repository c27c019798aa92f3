# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled factorisation update kernels.

Single pass over the CSR nonzeros per call, no nnz-sized temporaries. The
CSR arrays must be float64 data (strictly positive) with int64 indices;
factors must be C-contiguous float64.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport log

cnp.import_array()


def right_numerator(const double[::1] data,
                    const cnp.int64_t[::1] indices,
                    const cnp.int64_t[::1] indptr,
                    const double[:, ::1] left,
                    const double[:, ::1] right,
                    double eps):
    """(q x cols) array: sum_u left[u, q] * d_uc / (left@right)_uc over nonzeros."""
    cdef Py_ssize_t n_rows = left.shape[0]
    cdef Py_ssize_t q = left.shape[1]
    out_arr = np.zeros((q, right.shape[1]), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t u, k, j, c
    cdef double approx, ratio
    for u in range(n_rows):
        for k in range(indptr[u], indptr[u + 1]):
            c = indices[k]
            approx = 0.0
            for j in range(q):
                approx += left[u, j] * right[j, c]
            if approx < eps:
                approx = eps
            ratio = data[k] / approx
            for j in range(q):
                out[j, c] += left[u, j] * ratio
    return out_arr


def left_numerator(const double[::1] data,
                   const cnp.int64_t[::1] indices,
                   const cnp.int64_t[::1] indptr,
                   const double[:, ::1] left,
                   const double[:, ::1] right,
                   double eps):
    """(rows x q) array: sum_c right[q, c] * d_uc / (left@right)_uc over nonzeros."""
    cdef Py_ssize_t n_rows = left.shape[0]
    cdef Py_ssize_t q = left.shape[1]
    out_arr = np.zeros((n_rows, q), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t u, k, j, c
    cdef double approx, ratio
    for u in range(n_rows):
        for k in range(indptr[u], indptr[u + 1]):
            c = indices[k]
            approx = 0.0
            for j in range(q):
                approx += left[u, j] * right[j, c]
            if approx < eps:
                approx = eps
            ratio = data[k] / approx
            for j in range(q):
                out[u, j] += right[j, c] * ratio
    return out_arr


def kl_nonzero_terms(const double[::1] data,
                     const cnp.int64_t[::1] indices,
                     const cnp.int64_t[::1] indptr,
                     const double[:, ::1] left,
                     const double[:, ::1] right,
                     double eps):
    """sum of d * (ln(d / (left@right)) - 1) over the nonzeros."""
    cdef Py_ssize_t n_rows = left.shape[0]
    cdef Py_ssize_t q = left.shape[1]
    cdef Py_ssize_t u, k, j, c
    cdef double approx, total = 0.0
    for u in range(n_rows):
        for k in range(indptr[u], indptr[u + 1]):
            c = indices[k]
            approx = 0.0
            for j in range(q):
                approx += left[u, j] * right[j, c]
            if approx < eps:
                approx = eps
            total += data[k] * (log(data[k] / approx) - 1.0)
    return total
