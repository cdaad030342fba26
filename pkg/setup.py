"""Build the optional compiled rasterization kernel.

    pip install -e . --no-build-isolation
    python setup.py build_ext --inplace

If Cython or a C compiler is unavailable the package still installs and
falls back to the numpy kernel at import time.
"""

import os

from setuptools import setup

ext_modules = []
if os.environ.get("WILDSPLAT_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "wildsplat._kernel",
                    ["src/wildsplat/_kernel.pyx"],
                    include_dirs=[np.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError as exc:
        print(f"wildsplat: building without compiled kernel ({exc})")

setup(ext_modules=ext_modules)
