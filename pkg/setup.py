import os

from setuptools import Extension, setup

try:
    import numpy as np
    from Cython.Build import cythonize

    USE_CYTHON = os.environ.get("EEGSSFI_PURE_PYTHON", "") not in ("1", "true", "yes")
except ImportError:
    USE_CYTHON = False

ext_modules = []
if USE_CYTHON:
    ext_modules = cythonize(
        [
            Extension(
                "eegssfi.nn._ckernels",
                ["src/eegssfi/nn/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
