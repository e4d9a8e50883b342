"""CrossStitch: per-pixel inter-map mixing, zero-initialized to a no-op.

Input is a map stack [..., M, H, W, C]. Conceptually each pixel is
rearranged to a [C, M] slab ("m h w c -> (h w) c m"); the module then
applies, per pixel:

  (a) a depthwise 1-D convolution along the map axis (kernel length M,
      zero 'same' padding, one kernel per channel),
  (b) a pointwise C->C channel mix per (pixel, map),
  (c) a parallel branch: mean over maps, C->C mix, broadcast back,

and adds (b)+(c) residually onto the input ("(h w) c m -> m h w c").
The code below computes the same thing directly on the stack layout;
no spatial position ever mixes with another.

All kernels and biases start at exactly zero, so a fresh module is a
bit-exact identity and can be dropped into a trained backbone without
disturbing it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from himat import tensor as T
from himat.errors import ShapeMismatch
from himat.himt import read_himt, write_himt
from himat.tensor import Tensor


@dataclass
class CrossStitchParams:
    depthwise: Tensor  # [C, M], per-channel kernel over the map axis
    pointwise: Tensor  # [C_out, C_in]
    pooled: Tensor  # [C_out, C_in]
    bias_depthwise: Tensor  # [C]
    bias_pointwise: Tensor  # [C]
    bias_pooled: Tensor  # [C]

    @property
    def maps(self):
        return self.depthwise.shape[1]

    @property
    def channels(self):
        return self.depthwise.shape[0]

    def parameters(self):
        return [
            self.depthwise,
            self.pointwise,
            self.pooled,
            self.bias_depthwise,
            self.bias_pointwise,
            self.bias_pooled,
        ]


def crossstitch_init(m, c, dtype=np.float64):
    """All-zero parameters: the module starts as an exact identity."""
    if m < 1 or c < 1:
        raise ValueError(f"need m, c >= 1, got {m}, {c}")
    z = lambda *shape: Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)
    return CrossStitchParams(
        depthwise=z(c, m),
        pointwise=z(c, c),
        pooled=z(c, c),
        bias_depthwise=z(c),
        bias_pointwise=z(c),
        bias_pooled=z(c),
    )


def crossstitch_forward(f, p):
    """f + delta for a stack [..., M, H, W, C]; differentiable.

    delta = pointwise(depthwise(f)) + pooled(mean over maps), with the
    depthwise stage a length-M zero-padded 'same' correlation along the
    map axis: out[m] = sum_j k[:, j] * f[m + j - (M-1)//2].
    """
    f = f if isinstance(f, Tensor) else Tensor(f)
    m, c = p.maps, p.channels
    if f.ndim < 4:
        raise ShapeMismatch(f"expected [..., M, H, W, C], got {f.shape}")
    if f.shape[-4] != m or f.shape[-1] != c:
        raise ShapeMismatch(f"stack {f.shape} does not match params (M={m}, C={c})")
    map_ax = f.ndim - 4

    pad_lo = (m - 1) // 2
    pad_hi = m - 1 - pad_lo
    fpad = T.pad_axis(f, map_ax, pad_lo, pad_hi)
    dw = None
    for j in range(m):
        shifted = T.slice_axis(fpad, map_ax, j, j + m)
        kj = T.slice_axis(p.depthwise, 1, j, j + 1)  # [C, 1]
        term = T.mul(shifted, T.reshape(kj, (c,)))
        dw = term if dw is None else T.add(dw, term)
    dw = T.add(dw, p.bias_depthwise)

    pw = T.add(T.matmul(dw, T.swap_last(p.pointwise)), p.bias_pointwise)

    pooled_in = T.tmean(f, axis=map_ax, keepdims=True)  # [..., 1, H, W, C]
    pooled = T.add(T.matmul(pooled_in, T.swap_last(p.pooled)), p.bias_pooled)

    return T.add(f, T.add(pw, pooled))


def crossstitch_infer(f_data, p):
    """Inference-only twin of crossstitch_forward on plain arrays.

    The depthwise stage is unrolled into shifted in-place accumulations
    (no padded copy, no per-tap temporaries); this is the path the
    benchmark times.
    """
    f_data = np.asarray(f_data)
    m, c = p.maps, p.channels
    map_ax = f_data.ndim - 4
    pad_lo = (m - 1) // 2
    kern = p.depthwise.data.astype(f_data.dtype, copy=False)

    def shifted(arr, lo, hi):
        sl = [slice(None)] * arr.ndim
        sl[map_ax] = slice(lo, hi)
        return arr[tuple(sl)]

    dw = f_data * kern[:, pad_lo]
    for j in range(m):
        off = j - pad_lo  # output i reads input i + off
        if off == 0:
            continue
        if off > 0:
            shifted(dw, 0, m - off)[...] += shifted(f_data, off, m) * kern[:, j]
        else:
            shifted(dw, -off, m)[...] += shifted(f_data, 0, m + off) * kern[:, j]
    dw += p.bias_depthwise.data.astype(f_data.dtype, copy=False)
    pw = dw @ p.pointwise.data.T.astype(f_data.dtype, copy=False)
    pw += p.bias_pointwise.data.astype(f_data.dtype, copy=False)
    pooled = f_data.mean(axis=map_ax, keepdims=True) @ p.pooled.data.T.astype(f_data.dtype, copy=False)
    pooled += p.bias_pooled.data.astype(f_data.dtype, copy=False)
    return f_data + pw + pooled


def crossstitch_cost(m, h, w, c):
    """Analytic cost, multiply+add counted as 2 FLOPs.

    Per pixel: depthwise 2*M*M*C (M output maps x M taps x C channels),
    pointwise 2*M*C^2, map-mean accumulation M*C, pooled-branch mix
    2*C^2; times H*W pixels. Params: depthwise C*M, two C x C mixes,
    three C-vector biases.
    """
    if min(m, h, w, c) < 1:
        raise ValueError("dims must be positive")
    flops = h * w * (2 * m * m * c + 2 * m * c * c + m * c + 2 * c * c)
    params = c * m + 2 * c * c + 3 * c
    # live at once: input stack, one branch buffer, the pooled slice
    space = (2 * m + 1) * h * w * c
    return {"time_flops": flops, "space_units": space, "params": params}


def save_params(p, directory, prefix="crossstitch"):
    """HIMT file per kernel plus a JSON sidecar naming each one."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = {}
    for attr in ("depthwise", "pointwise", "pooled", "bias_depthwise", "bias_pointwise", "bias_pooled"):
        fname = f"{prefix}.{attr}.himt"
        write_himt(directory / fname, getattr(p, attr).data)
        names[attr] = fname
    sidecar = {"kind": "crossstitch", "maps": p.maps, "channels": p.channels, "tensors": names}
    (directory / f"{prefix}.json").write_text(json.dumps(sidecar, indent=2))


def load_params(directory, prefix="crossstitch", requires_grad=True):
    directory = Path(directory)
    sidecar = json.loads((directory / f"{prefix}.json").read_text())
    kw = {
        attr: Tensor(read_himt(directory / fname), requires_grad=requires_grad)
        for attr, fname in sidecar["tensors"].items()
    }
    return CrossStitchParams(**kw)
