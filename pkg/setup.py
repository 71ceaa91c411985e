"""Build script: compiles the optional Cython kernel core.

Set FEDRECON_SKIP_EXT=1 to skip compilation; the package then runs on the
pure-numpy kernel fallback selected automatically at import time.
"""
import os

from setuptools import setup

ext_modules = []
if not os.environ.get("FEDRECON_SKIP_EXT"):
    import numpy
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "fedrecon.engine.kernels._conv_cy",
                ["src/fedrecon/engine/kernels/_conv_cy.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
