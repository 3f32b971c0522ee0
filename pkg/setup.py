"""Build script: compiles the optional SMO extension when Cython and a C
compiler are available; the package falls back to the pure-numpy solver
otherwise, so a failed extension build is never fatal."""

from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize
    from setuptools import Extension

    ext = Extension(
        "apnea_screen._smo",
        ["src/apnea_screen/_smo.pyx"],
        include_dirs=[numpy.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    ext.optional = True
    ext_modules = cythonize([ext], language_level=3)
except ImportError:
    pass

setup(ext_modules=ext_modules)
