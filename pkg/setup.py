"""Build script for the optional compiled rollout kernel.

The pure-Python fallback in ``lunardescent._kernels._rollout_py`` is used
whenever the extension is not built.
"""
import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pragma: no cover
    cythonize = None

ext_modules = []
if cythonize is not None and not os.environ.get("LUNARDESCENT_NO_EXT"):
    ext_modules = cythonize(
        [
            Extension(
                "lunardescent._kernels._rollout_cy",
                ["src/lunardescent/_kernels/_rollout_cy.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
