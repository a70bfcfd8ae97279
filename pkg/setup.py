"""Build script: compiles the optional fast-kernel extension.

The package works without the extension (a NumPy fallback is selected at
import time); building it just makes convolutions, pooling and the distance
transform faster.  If Cython or a C compiler is missing, install proceeds
without the extension.
"""
from setuptools import setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "canet._kernels._fast",
                ["src/canet/_kernels/_fast.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        language_level=3,
    )
except ImportError as exc:  # pragma: no cover - build-env dependent
    import sys

    print(f"canet: skipping fast-kernel extension ({exc})", file=sys.stderr)

setup(ext_modules=ext_modules)
