"""Builds the optional Cython kernels; the package falls back to numpy without them."""
import os

import numpy as np
from setuptools import Extension, setup


def get_extensions():
    if os.environ.get("MASKPLAN_NO_EXT"):
        return []
    try:
        from Cython.Build import cythonize
    except ImportError:
        return []
    extensions = [
        Extension(
            "maskplan._kernels",
            ["src/maskplan/_kernels.pyx"],
            include_dirs=[np.get_include()],
            # no -ffast-math: results must match the numpy fallback bit for bit
            extra_compile_args=["-O3", "-ffp-contract=off"],
        )
    ]
    return cythonize(extensions, compiler_directives={"language_level": "3"})


setup(ext_modules=get_extensions())
