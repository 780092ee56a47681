"""Build script for the optional compiled kernel extension.

The package is fully functional without the extension: toptd.kernels falls
back to a pure-numpy implementation when the compiled module is missing.
"""

from setuptools import Extension, setup

try:
    import numpy as np
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "toptd.kernels._compiled",
                ["src/toptd/kernels/_compiled.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions)
