import os

import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

# ISOCAL_NO_EXT=1 skips the compiled core; the package then runs on the
# pure-Python kernels.
if os.environ.get("ISOCAL_NO_EXT"):
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "isocal._core",
                ["src/isocal/_core.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(package_dir={"": "src"}, ext_modules=ext_modules)
