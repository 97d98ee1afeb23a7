"""Build the optional compiled kernel core.

If Cython or a C compiler is missing the package still installs; the numpy
fallback kernels are selected at import time.
"""

import os

from setuptools import setup

ext_modules = []
if os.environ.get("LEANTTA_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "leantta._ckernels",
                    ["src/leantta/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
