"""Build script: compiles the optional decode-kernel extension.

The package works without the extension (a numpy fallback is selected at
import time), so a failed compile only disables the fast path.
"""

import numpy
from setuptools import setup
from setuptools.errors import CCompilerError, ExecError, PlatformError


def extensions():
    try:
        from Cython.Build import cythonize
    except ImportError:
        return []
    from setuptools import Extension

    return cythonize(
        [
            Extension(
                "microvlm._ckernels",
                ["src/microvlm/_ckernels.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )


try:
    setup(ext_modules=extensions())
except (CCompilerError, ExecError, PlatformError):
    setup(ext_modules=[])
