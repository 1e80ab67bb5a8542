import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pure-Python install; the fallback kernels are used
    cythonize = None

ext_modules = []
if cythonize is not None and os.environ.get("FCDISTILL_NO_EXT") != "1":
    ext_modules = cythonize(
        [
            Extension(
                "fcdistill._ckernels",
                ["src/fcdistill/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                # no contraction: results must match the pure-Python kernels bit for bit
                extra_compile_args=["-O3", "-ffp-contract=off"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
