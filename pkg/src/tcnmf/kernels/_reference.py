"""Pure-NumPy/SciPy implementations of the factorisation update kernels.

Fallback backend used when the compiled extension is unavailable (or when
``TCNMF_PURE_PYTHON`` is set). Same contracts as ``_core``: the first three
arguments describe a CSR matrix with strictly positive float64 data and int64
index arrays; ``left`` is the (rows x q) factor and ``right`` the (q x cols)
factor, both C-contiguous float64 with entries >= eps.
"""

import numpy as np
import scipy.sparse as sp


def _nonzero_ratios(data, indices, indptr, left, right, eps):
    """data / max((left @ right), eps) evaluated only at the nonzeros."""
    rows = np.repeat(np.arange(len(indptr) - 1), np.diff(indptr))
    approx = np.einsum("nq,nq->n", left[rows], right[:, indices].T)
    np.maximum(approx, eps, out=approx)
    return data / approx


def _ratio_matrix(data, indices, indptr, left, right, eps):
    ratios = _nonzero_ratios(data, indices, indptr, left, right, eps)
    shape = (len(indptr) - 1, right.shape[1])
    return sp.csr_matrix((ratios, indices, indptr), shape=shape)


def right_numerator(data, indices, indptr, left, right, eps):
    """(q x cols) array: sum_u left[u, q] * d_uc / (left@right)_uc over nonzeros."""
    ratio = _ratio_matrix(data, indices, indptr, left, right, eps)
    return np.ascontiguousarray((ratio.T @ left).T)


def left_numerator(data, indices, indptr, left, right, eps):
    """(rows x q) array: sum_c right[q, c] * d_uc / (left@right)_uc over nonzeros."""
    ratio = _ratio_matrix(data, indices, indptr, left, right, eps)
    return ratio @ right.T


def kl_nonzero_terms(data, indices, indptr, left, right, eps):
    """sum of d * (ln(d / (left@right)) - 1) over the nonzeros.

    The remaining part of the generalized KL divergence, sum of (left@right)
    over all entries, factorises into a cheap dense expression and is added
    by the caller.
    """
    ratios = _nonzero_ratios(data, indices, indptr, left, right, eps)
    return float(np.sum(data * (np.log(ratios) - 1.0)))
