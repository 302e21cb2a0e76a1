from setuptools import Extension, setup

import numpy as np

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

# -ffp-contract=off: the pure-numpy fallback must stay bit-identical to the
# compiled kernels, so FMA contraction is disabled.
ext = Extension(
    "advaug._kernels._warp_cy",
    sources=["src/advaug/_kernels/_warp_cy.pyx"],
    include_dirs=[np.get_include()],
    extra_compile_args=["-O3", "-ffp-contract=off"],
    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
)

setup(ext_modules=cythonize([ext], language_level="3") if cythonize else [])
