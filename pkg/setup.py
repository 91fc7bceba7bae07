import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "spillgp._filter_cy",
                ["src/spillgp/_filter_cy.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level="3",
    )
except ImportError:
    # Cython unavailable: install the pure-Python package, the runtime
    # backend selection falls back automatically.
    extensions = []

setup(ext_modules=extensions)
