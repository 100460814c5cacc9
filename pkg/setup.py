"""Build script: compiles the Metropolis-Hastings kernel when a C toolchain
and Cython are available, otherwise installs pure Python (the package falls
back to the numpy kernel at import time)."""

import sys

from setuptools import setup

try:
    import numpy
    from Cython.Build import cythonize
    from setuptools.extension import Extension

    extensions = cythonize(
        [
            Extension(
                "fpcox._mh",
                ["src/fpcox/_mh.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except Exception as exc:  # pragma: no cover - build-environment dependent
    sys.stderr.write(f"fpcox: compiled kernel disabled ({exc}); "
                     "installing with the pure-numpy sampler only\n")
    extensions = []

setup(ext_modules=extensions)
