"""Numerical kernels with a compiled core and a pure-Python fallback.

The compiled extension is used when it imports; setting the environment
variable ``PARAMGATE_PURE_PYTHON=1`` forces the numpy/scipy implementation.
``BACKEND`` names the active one.
"""
import os

from . import _pykernels as python

if os.environ.get("PARAMGATE_PURE_PYTHON", "") not in ("", "0"):
    compiled = None
else:
    try:
        from . import _ckernels as compiled
    except ImportError:  # extension not built
        compiled = None

_impl = compiled if compiled is not None else python
BACKEND = "cython" if compiled is not None else "python"

bessel_jn = _impl.bessel_jn
bessel_jn_array = _impl.bessel_jn_array
propagate = _impl.propagate
propagate_cumulative = _impl.propagate_cumulative

__all__ = [
    "BACKEND",
    "bessel_jn",
    "bessel_jn_array",
    "compiled",
    "propagate",
    "propagate_cumulative",
    "python",
]
