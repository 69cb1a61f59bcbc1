from Cython.Build import cythonize
from setuptools import Extension, setup

extensions = [
    Extension(
        "avdetect._ckernels",
        ["src/avdetect/_ckernels.pyx"],
        extra_compile_args=["-O3"],
        optional=True,
    )
]

setup(ext_modules=cythonize(extensions, language_level=3))
