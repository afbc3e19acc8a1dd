"""Builds the optional Cython kernels; the package works without them."""

import os

from setuptools import Extension, setup

ext_modules = []
if not os.environ.get("LF_NO_EXTENSIONS"):
    try:
        from Cython.Build import cythonize
    except ImportError:
        print("Cython not available: installing the pure-Python kernels only")
    else:
        ext_modules = cythonize(
            [Extension("limitless.workloads._kernels", ["src/limitless/workloads/_kernels.pyx"],
                       extra_compile_args=["-O3"])],
            compiler_directives={"language_level": "3", "boundscheck": False, "wraparound": False},
        )

setup(ext_modules=ext_modules)
