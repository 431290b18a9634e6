"""Hot-kernel backend chosen at import time.

The compiled ``_core`` extension is used when it was built; otherwise the
numpy implementation in ``_kernels_py`` is used.  Setting the environment
variable ``DKMPC_PURE_PYTHON=1`` forces the fallback.
"""
import os

from . import _kernels_py

BACKENDS = {"python": _kernels_py}

try:
    from . import _core
except ImportError:  # extension not built
    _core = None
else:
    BACKENDS["compiled"] = _core

if _core is not None and os.environ.get("DKMPC_PURE_PYTHON", "") in ("", "0"):
    BACKEND = "compiled"
else:
    BACKEND = "python"

_impl = BACKENDS[BACKEND]
quad_deriv = _impl.quad_deriv
quad_jac = _impl.quad_jac
rk4_step = _impl.rk4_step
rk4_step_jac = _impl.rk4_step_jac
fgm_box_qp = _impl.fgm_box_qp


def get_backend(name=None):
    """Return the kernel module ``name`` ("compiled" or "python")."""
    if name is None:
        return _impl
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} is not available") from None
