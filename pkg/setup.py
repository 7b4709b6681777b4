"""Builds the compiled convolution kernels.

The package works without the extension (a pure-numpy fallback is selected
at import time), but training is several times faster with it. Build in
place with:

    python setup.py build_ext --inplace
"""

import os

import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

# The extension is always compiled from source on the machine that runs it,
# so we tune for the local CPU. Set SPINESEG_NO_NATIVE=1 to build a generic
# binary instead.
cflags = ["-O3", "-ffast-math"]
if os.environ.get("SPINESEG_NO_NATIVE", "") in ("", "0"):
    cflags.append("-march=native")

extensions = [
    Extension(
        "spineseg._kernels",
        ["src/spineseg/_kernels.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=cflags,
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
]

setup(
    ext_modules=cythonize(
        extensions,
        compiler_directives={
            "language_level": 3,
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "nonecheck": False,
        },
    ),
)
