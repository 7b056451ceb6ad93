"""Pick the compiled kernels when available, otherwise the numpy versions.

Set ``TRANSMIX_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _kernels_py

try:
    from . import _kernels as _compiled
except ImportError:
    _compiled = None

_force_py = os.environ.get("TRANSMIX_PURE_PYTHON", "") not in ("", "0")
_active = _compiled if (_compiled is not None and not _force_py) else _kernels_py
BACKEND = _active.BACKEND

stencil_apply = _active.stencil_apply
dirichlet_sum = _active.dirichlet_sum
noise_apply = _active.noise_apply


def get_backend(name=None):
    """Module with the kernel functions: 'cython', 'numpy' or None for the active one."""
    if name is None:
        return _active
    if name == "numpy":
        return _kernels_py
    if name == "cython":
        if _compiled is None:
            raise ImportError("compiled kernels are not built")
        return _compiled
    raise ValueError(f"unknown backend {name!r}")


def available_backends():
    return ["numpy"] + (["cython"] if _compiled is not None else [])
