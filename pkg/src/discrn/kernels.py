"""Kernel backend selection.

The compiled Cython extension is used when it imports; otherwise, or when
``DISCRN_PURE_PYTHON=1`` is set, the NumPy fallback is used.  Both backends
are importable explicitly as ``compiled`` (may be ``None``) and ``python``.
"""

import os

from . import _kernels_py as python

try:
    from . import _kernels as compiled
except ImportError:  # extension not built
    compiled = None

if compiled is not None and os.environ.get("DISCRN_PURE_PYTHON", "") not in ("1", "true", "yes"):
    backend = compiled
    BACKEND = "cython"
else:
    backend = python
    BACKEND = "python"


def get(name=None):
    """Return a backend module by name (``"cython"``/``"python"``) or the active one."""
    if name is None:
        return backend
    if name == "python":
        return python
    if name == "cython":
        if compiled is None:
            raise ImportError("compiled kernels are not available; build the extension")
        return compiled
    raise ValueError(f"unknown backend {name!r}")
