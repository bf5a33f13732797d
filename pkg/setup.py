import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "asapseg.kernels._convext",
                ["src/asapseg/kernels/_convext.pyx"],
                extra_compile_args=["-O3", "-fopenmp"],
                extra_link_args=["-fopenmp"],
                include_dirs=[numpy.get_include()],
            )
        ],
        language_level=3,
    )
except ImportError:
    # No Cython: the package still works through the numpy fallback kernels.
    ext_modules = []

setup(ext_modules=ext_modules)
