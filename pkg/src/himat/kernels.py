"""Kernel backend selection: compiled extension or numpy fallback.

The compiled module is used when it imported successfully and
HIMAT_NO_EXT is unset. `backend_name()` reports which one is active;
`himat bench-kernels` times one against the other.
"""

import os

import numpy as np

from himat import _kernels_np

if os.environ.get("HIMAT_NO_EXT"):
    _impl = _kernels_np
else:
    try:
        from himat import _kernels_cy as _impl
    except ImportError:
        _impl = _kernels_np


def backend_name(impl=None):
    mod = impl if impl is not None else _impl
    return "compiled" if mod.__name__.endswith("_kernels_cy") else "numpy"


def available_backends():
    backends = {"numpy": _kernels_np}
    try:
        from himat import _kernels_cy

        backends["compiled"] = _kernels_cy
    except ImportError:
        pass
    return backends


def filter_periodic(x, taps, dilation=1, axis=-1, adjoint=False, impl=None):
    """Circular-boundary correlation of `x` with `taps` along `axis`.

    taps[k] weights the sample at +k*dilation (forward) or -k*dilation
    (adjoint); the adjoint direction is the exact transpose of the
    forward one, which is what reverse-mode differentiation needs.
    Works on arrays of any rank; non-filtered axes are batched.
    """
    mod = impl if impl is not None else _impl
    x = np.asarray(x)
    axis = axis % x.ndim
    moved = np.moveaxis(x, axis, -1)
    lead = moved.shape[:-1]
    n = moved.shape[-1]
    flat = np.ascontiguousarray(moved.reshape(-1, n))
    taps = np.ascontiguousarray(taps, dtype=np.float64)
    out = mod.filter_periodic_last(flat, taps, int(dilation), bool(adjoint))
    return np.moveaxis(np.asarray(out).reshape(*lead, n), -1, axis)


def glcm_counts(q, dy, dx, levels, impl=None):
    """Co-occurrence counts for one offset; q is an int level image."""
    mod = impl if impl is not None else _impl
    q = np.ascontiguousarray(q, dtype=np.int32)
    return np.asarray(mod.glcm_accumulate(q, int(dy), int(dx), int(levels)))
