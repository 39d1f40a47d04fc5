"""Convolution kernel backend, chosen once at import.

The compiled extension is used when it was built; otherwise the numpy
implementation is used. Set ``PHYDAE_KERNELS=python`` to force the fallback.
"""
import logging
import os

from . import _pykernels

log = logging.getLogger(__name__)


def _select():
    if os.environ.get("PHYDAE_KERNELS", "").lower() == "python":
        return _pykernels
    try:
        from . import _ckernels
    except ImportError:
        log.debug("compiled kernels unavailable; using numpy fallback")
        return _pykernels
    return _ckernels


_impl = _select()

BACKEND = _impl.BACKEND
im2col = _impl.im2col
col2im = _impl.col2im
dw_forward = _impl.dw_forward
dw_backward_input = _impl.dw_backward_input
dw_backward_weight = _impl.dw_backward_weight


def available_backends():
    """Map backend name to kernel module for every backend importable here."""
    backends = {"python": _pykernels}
    try:
        from . import _ckernels
    except ImportError:
        pass
    else:
        backends["cython"] = _ckernels
    return backends
