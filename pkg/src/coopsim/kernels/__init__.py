"""Hot numeric kernels with two interchangeable backends.

Every kernel exists twice: a numba @njit implementation and a pure
numpy/python one with identical semantics.  The active backend is picked
once at import time from the ``COOPSIM_BACKEND`` environment variable:

  auto   (default) curated mix: numba for scalar-loop kernels (raycast,
         polygon IoU, range coder), numpy/BLAS where vectorization wins
         (convolutions, bilinear gather)
  numba  force numba everywhere
  numpy  force the pure numpy/python path everywhere

``benchmarks/kernel_bench.py`` compares the two paths per kernel.
"""

import os
import warnings

from . import numpy_backend

_CONV_KERNELS = (
    "conv2d_forward",
    "conv2d_input_grad",
    "conv2d_kernel_grad",
    "bilinear_gather",
    "bilinear_gather_grads",
)
_LOOP_KERNELS = (
    "raycast",
    "rotated_iou_pair",
    "rotated_iou_matrix",
    "rc_encode",
    "rc_decode",
    "rc_encode_adaptive",
    "rc_decode_adaptive",
)
KERNEL_NAMES = _CONV_KERNELS + _LOOP_KERNELS

BACKEND = os.environ.get("COOPSIM_BACKEND", "auto").lower()
if BACKEND not in ("auto", "numba", "numpy"):
    raise ValueError(f"COOPSIM_BACKEND must be auto|numba|numpy, got {BACKEND!r}")

if BACKEND in ("auto", "numba"):
    try:
        from . import numba_backend
    except ImportError as exc:  # pragma: no cover
        if BACKEND == "numba":
            raise
        warnings.warn(f"numba unavailable ({exc}); falling back to numpy kernels")
        BACKEND = "numpy"
        numba_backend = None
else:  # pragma: no cover
    numba_backend = None


def _pick(name):
    if BACKEND == "numpy" or numba_backend is None:
        return getattr(numpy_backend, name)
    if BACKEND == "numba":
        return getattr(numba_backend, name)
    # auto: loop-style kernels go to numba, array-style stay on numpy/BLAS
    src = numba_backend if name in _LOOP_KERNELS else numpy_backend
    return getattr(src, name)


_globals = globals()
for _name in KERNEL_NAMES:
    _globals[_name] = _pick(_name)
del _globals, _name
