"""Pick the rasterization kernel at import time.

``WILDSPLAT_BACKEND=python`` forces the numpy fallback; ``cython`` makes a
missing extension an error; ``auto`` (default) prefers the compiled one.
"""

import os

from wildsplat import _kernel_py


BACKENDS = ("auto", "python", "cython")


def load(name: str = "auto"):
    if name not in BACKENDS:
        raise ValueError(f"unknown backend {name!r}; choose from {', '.join(BACKENDS)}")
    if name == "python":
        return _kernel_py
    try:
        from wildsplat import _kernel
    except ImportError:
        if name == "cython":
            raise
        return _kernel_py
    return _kernel


kernel = load(os.environ.get("WILDSPLAT_BACKEND", "auto"))
