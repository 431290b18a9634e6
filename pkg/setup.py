from setuptools import Extension, setup
from Cython.Build import cythonize
import numpy as np

ext_modules = cythonize(
    [Extension("dkmpc._core", ["src/dkmpc/_core.pyx"],
               include_dirs=[np.get_include()],
               extra_compile_args=["-O3"],
               optional=True)],
    compiler_directives={"language_level": 3},
)

setup(ext_modules=ext_modules)
