"""Update kernels for the KL factorisation, with backend selection.

The compiled Cython extension is preferred when it was built; otherwise the
NumPy/SciPy reference implementation is used. Set ``TCNMF_PURE_PYTHON=1`` to
force the reference backend (used by the benchmark and the backend-agreement
tests). Both backends implement the same three functions and agree to
floating-point roundoff.
"""

import os

from tcnmf.kernels import _reference

if os.environ.get("TCNMF_PURE_PYTHON"):
    _impl = _reference
    BACKEND = "python"
else:
    try:
        from tcnmf.kernels import _core as _impl

        BACKEND = "compiled"
    except ImportError:
        _impl = _reference
        BACKEND = "python"

right_numerator = _impl.right_numerator
left_numerator = _impl.left_numerator
kl_nonzero_terms = _impl.kl_nonzero_terms

__all__ = ["BACKEND", "right_numerator", "left_numerator", "kl_nonzero_terms"]
