import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

# The compiled filtering core is optional: scribseg falls back to the numpy
# implementation when the extension is missing (see scribseg/filters.py).
extensions = [
    Extension(
        "scribseg._filters_cy",
        ["src/scribseg/_filters_cy.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3"],
        optional=True,
    )
]

setup(
    ext_modules=cythonize(extensions, compiler_directives={"language_level": 3})
    if cythonize
    else [],
)
