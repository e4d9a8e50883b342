"""Pure-numpy implementations of the hot kernels.

Same signatures as the compiled module `_kernels_cy`; `himat.kernels`
picks one of the two at import time.
"""

import numpy as np


def filter_periodic_last(x, taps, dilation, adjoint):
    """Filter the last axis of a 2-D array with circular boundary.

    Forward:  out[r, n] = sum_k taps[k] * x[r, (n + k*dilation) % N]
    Adjoint:  out[r, n] = sum_k taps[k] * x[r, (n - k*dilation) % N]

    Dilation > 1 inserts zeros between taps (a-trous filtering).
    """
    n = x.shape[1]
    out = np.zeros_like(x)
    sign = -1 if adjoint else 1
    for k, t in enumerate(taps):
        s = (sign * k * dilation) % n
        if s == 0:
            out += t * x
        else:
            # out[:, j] += t * x[:, (j + s) % n]
            out[:, : n - s] += t * x[:, s:]
            out[:, n - s :] += t * x[:, :s]
    return out


def glcm_accumulate(q, dy, dx, levels):
    """Co-occurrence counts of quantized levels at one pixel offset.

    q: int32 [H, W]; counts pairs (q[r, c], q[r+dy, c+dx]) that fall
    inside the image. Returns int64 [levels, levels].
    """
    h, w = q.shape
    r0, r1 = max(0, -dy), min(h, h - dy)
    c0, c1 = max(0, -dx), min(w, w - dx)
    a = q[r0:r1, c0:c1].ravel()
    b = q[r0 + dy : r1 + dy, c0 + dx : c1 + dx].ravel()
    counts = np.zeros((levels, levels), dtype=np.int64)
    np.add.at(counts, (a, b), 1)
    return counts
