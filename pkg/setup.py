"""Build script for the optional compiled update kernels.

The package works without the extension (a NumPy fallback is selected at
import time); building it just makes the factorisation inner loop faster.
"""

from setuptools import Extension, setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "tcnmf.kernels._core",
                ["src/tcnmf/kernels/_core.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except ImportError:
    # No Cython / NumPy at build time: install pure-Python only.
    pass

setup(ext_modules=ext_modules)
