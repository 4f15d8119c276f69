"""Kernel backend selection.

The compiled extension ``takeup._core`` is used when it imports; otherwise the
numpy implementation in ``takeup._core_py`` is used.  Setting the environment
variable ``TAKEUP_PURE_PYTHON=1`` forces the numpy path.
"""

import os

from . import _core_py

BACKEND = "python"
_compiled = None

if os.environ.get("TAKEUP_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _core as _compiled
    except ImportError:  # extension not built
        _compiled = None
    else:
        BACKEND = "compiled"

_impl = _compiled if _compiled is not None else _core_py


def get_backend(name: str | None = None):
    """Return the kernel module for ``name`` ('compiled', 'python') or the active one."""
    if name is None:
        return _impl
    if name == "python":
        return _core_py
    if name == "compiled":
        if _compiled is None:
            raise ImportError("compiled kernels are not available; build with `pip install -e .`")
        return _compiled
    raise ValueError(f"unknown backend {name!r}")


def household_loglik(*args, **kwargs):
    return _impl.household_loglik(*args, **kwargs)


def household_log_cpl(*args, **kwargs):
    return _impl.household_log_cpl(*args, **kwargs)


def household_loglik_grad(*args, **kwargs):
    return _impl.household_loglik_grad(*args, **kwargs)
