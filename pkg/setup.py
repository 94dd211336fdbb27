"""Build script: compiles the optional Cython kernel extension.

Set BILOTRACK_NO_EXT=1 to skip the extension entirely; the package then
runs on the pure NumPy kernel backend.
"""

import os

from setuptools import Extension, setup

ext_modules = []
if not os.environ.get("BILOTRACK_NO_EXT"):
    import numpy
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "bilotrack._kernels._core",
                ["src/bilotrack/_kernels/_core.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
