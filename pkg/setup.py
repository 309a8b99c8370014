"""Build script for the optional compiled kernel extension.

The package runs fine without the extension (a numpy fallback is selected
at import time); building it just makes the conv/resample inner loops
faster.  `pip install -e . --no-build-isolation` or
`python setup.py build_ext --inplace` both produce it.
"""

from setuptools import Extension, setup

try:
    import numpy as np
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "topomoe._kernels.cykernels",
                ["src/topomoe/_kernels/cykernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions)
