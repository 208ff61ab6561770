"""Kernel backend selection.

The compiled core (_ckernels, Cython) is preferred when it built; the
numpy implementation (_kernels_np) is the fallback. Set GPSFT_KERNELS
to "compiled" or "python" to force one. Within a process exactly one
backend is active, so repeated runs reduce in the same order and
produce bitwise-identical floats.
"""

import os

from .errors import ConfigError
from . import _kernels_np

try:
    from . import _ckernels
except ImportError:
    _ckernels = None

_IMPLS = {"python": _kernels_np}
if _ckernels is not None:
    _IMPLS["compiled"] = _ckernels


def _pick():
    forced = os.environ.get("GPSFT_KERNELS")
    if forced is not None:
        if forced not in ("python", "compiled"):
            raise ConfigError(f"GPSFT_KERNELS must be 'python' or 'compiled', got {forced!r}")
        if forced not in _IMPLS:
            raise ConfigError("GPSFT_KERNELS=compiled but the compiled core is not built")
        return _IMPLS[forced]
    return _IMPLS.get("compiled", _kernels_np)


_active = _pick()

BACKEND = _active.BACKEND

matmul = _active.matmul
matmul_grad_a = _active.matmul_grad_a
matmul_grad_b = _active.matmul_grad_b
bmm = _active.bmm
bmm_grad_a = _active.bmm_grad_a
bmm_grad_b = _active.bmm_grad_b
conv2d_forward = _active.conv2d_forward
conv2d_grad_input = _active.conv2d_grad_input
conv2d_grad_kernel = _active.conv2d_grad_kernel


def available_backends():
    return tuple(sorted(_IMPLS))


def get_backend(name):
    """Fetch a specific implementation module (for tests and benchmarks)."""
    if name not in _IMPLS:
        raise ConfigError(f"unknown kernel backend {name!r}; built: {available_backends()}")
    return _IMPLS[name]
