import os

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
    import numpy as np

    USE_CYTHON = os.environ.get("WGMLAB_NO_EXT", "") == ""
except ImportError:
    USE_CYTHON = False

extensions = []
if USE_CYTHON:
    extensions = cythonize(
        [
            Extension(
                "wgmlab._kernels",
                ["src/wgmlab/_kernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={
            "language_level": 3,
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )

setup(ext_modules=extensions)
