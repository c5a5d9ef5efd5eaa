"""Builds the optional compiled-kernel extension.

    python setup.py build_ext --inplace

The package is fully functional without it (the numpy fallback is selected
at import time), so a missing Cython just skips the extension.
"""

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "ddxplan._core._speedups",
                ["src/ddxplan/_core/_speedups.pyx"],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
        },
    )
except ImportError:
    print("cython not available; building without compiled kernels")
    ext_modules = []

setup(ext_modules=ext_modules)
