"""SVBRDF data model: named maps, map packing, a toy latent codec, and
a procedural synthetic dataset.

A material is five pixel-aligned maps: basecolor and normal (3-channel)
plus scalar roughness, metallic and height. For the generative stack the
three scalars are channel-packed into one image, giving a 3-map stack
[3, H, W, 3] whose pack/unpack is bit-exact.

The toy codec stands in for a pretrained 32x autoencoder: space-to-depth
by a factor f followed by a per-map linear projection. Lossless mode
(C = 3 f^2, orthogonal projection) round-trips to 1e-10 and is what the
mechanism tests run on; lossy mode (C < 3 f^2) is trained briefly for
realism.

Everything the generator produces is tileable (circular interpolation,
integer frequencies, toroidal distances), and the normal map is the
normalized gradient of the height field, so cross-map structure is
aligned by construction.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from himat import tensor as T
from himat.errors import IndivisibleDims, ShapeMismatch
from himat.tensor import Tensor

MAP_NAMES = ("basecolor", "normal", "roughness", "metallic", "height")
PROMPT_FAMILIES = ("stripes", "cells", "noise", "checker")


@dataclass
class MaterialSet:
    basecolor: np.ndarray  # [H, W, 3] in [0, 1]
    normal: np.ndarray  # [H, W, 3], unit vectors encoded to [0, 1]
    roughness: np.ndarray  # [H, W]
    metallic: np.ndarray  # [H, W]
    height: np.ndarray  # [H, W]

    @property
    def hw(self):
        return self.basecolor.shape[:2]

    def maps(self):
        return {name: getattr(self, name) for name in MAP_NAMES}

    def validate(self, norm_tol=1e-3):
        h, w = self.hw
        for name, arr in self.maps().items():
            want = (h, w, 3) if name in ("basecolor", "normal") else (h, w)
            if arr.shape != want:
                raise ShapeMismatch(f"{name} has shape {arr.shape}, expected {want}")
            if arr.min() < -1e-9 or arr.max() > 1 + 1e-9:
                raise ValueError(f"{name} leaves [0, 1]: [{arr.min()}, {arr.max()}]")
        n = decode_normals(self.normal)
        lengths = np.linalg.norm(n, axis=-1)
        if np.abs(lengths - 1.0).max() > norm_tol:
            raise ValueError(f"normals deviate from unit length by {np.abs(lengths - 1).max()}")
        return self


def encode_normals(vectors):
    return (vectors + 1.0) / 2.0


def decode_normals(encoded):
    return encoded * 2.0 - 1.0


def normals_from_height(height, slope_scale):
    """Unit normals of the height field, circular central differences."""
    gx = (np.roll(height, -1, axis=1) - np.roll(height, 1, axis=1)) / 2.0
    gy = (np.roll(height, -1, axis=0) - np.roll(height, 1, axis=0)) / 2.0
    vec = np.stack([-slope_scale * gx, -slope_scale * gy, np.ones_like(height)], axis=-1)
    vec /= np.linalg.norm(vec, axis=-1, keepdims=True)
    return encode_normals(vec)


# -- packing ----------------------------------------------------------------

def pack_maps(m):
    """[basecolor | normal | (roughness, metallic, height)] -> [3, H, W, 3]."""
    if m.basecolor.shape != m.normal.shape:
        raise ShapeMismatch("basecolor and normal disagree")
    scalars = np.stack([m.roughness, m.metallic, m.height], axis=-1)
    return np.stack([m.basecolor, m.normal, scalars], axis=0)


def unpack_maps(p):
    p = np.asarray(p)
    if p.ndim != 4 or p.shape[0] != 3 or p.shape[3] != 3:
        raise ShapeMismatch(f"expected [3, H, W, 3], got {p.shape}")
    return MaterialSet(
        basecolor=p[0].copy(),
        normal=p[1].copy(),
        roughness=p[2, :, :, 0].copy(),
        metallic=p[2, :, :, 1].copy(),
        height=p[2, :, :, 2].copy(),
    )


# -- toy codec ----------------------------------------------------------------

@dataclass
class ToyCodec:
    factor: int
    enc: Tensor  # [3 f^2, C]
    dec: Tensor  # [C, 3 f^2]
    mode: str  # "lossless" | "lossy"

    @property
    def latent_channels(self):
        return self.enc.shape[1]

    @classmethod
    def lossless(cls, factor=4, seed=0):
        d = 3 * factor * factor
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        return cls(factor=factor, enc=Tensor(q), dec=Tensor(q.T.copy()), mode="lossless")

    @classmethod
    def lossy(cls, factor=4, channels=16, seed=0):
        d = 3 * factor * factor
        rng = np.random.default_rng(seed)
        enc = Tensor(rng.standard_normal((d, channels)) / np.sqrt(d), requires_grad=True)
        dec = Tensor(rng.standard_normal((channels, d)) / np.sqrt(channels), requires_grad=True)
        return cls(factor=factor, enc=enc, dec=dec, mode="lossy")

    def parameters(self):
        return [self.enc, self.dec]


def _space_to_depth(x, f):
    # [..., H, W, 3] -> [..., H/f, W/f, 3 f^2]
    h, w = x.shape[-3], x.shape[-2]
    lead = x.shape[:-3]
    nd = len(lead)
    x = T.reshape(x, lead + (h // f, f, w // f, f, 3))
    x = T.permute(x, tuple(range(nd)) + (nd, nd + 2, nd + 1, nd + 3, nd + 4))
    return T.reshape(x, lead + (h // f, w // f, f * f * 3))


def _depth_to_space(x, f):
    hh, ww = x.shape[-3], x.shape[-2]
    lead = x.shape[:-3]
    nd = len(lead)
    x = T.reshape(x, lead + (hh, ww, f, f, 3))
    x = T.permute(x, tuple(range(nd)) + (nd, nd + 2, nd + 1, nd + 3, nd + 4))
    return T.reshape(x, lead + (hh * f, ww * f, 3))


def encode(p, codec):
    """Packed stack [..., M, H, W, 3] -> latent [..., M, H/f, W/f, C]."""
    p = p if isinstance(p, Tensor) else Tensor(np.asarray(p, dtype=np.float64))
    h, w = p.shape[-3], p.shape[-2]
    if h % codec.factor or w % codec.factor:
        raise IndivisibleDims(f"{h}x{w} not divisible by factor {codec.factor}")
    return T.matmul(_space_to_depth(p, codec.factor), codec.enc)


def decode(z, codec):
    z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=np.float64))
    if z.shape[-1] != codec.latent_channels:
        raise ShapeMismatch(f"latent has {z.shape[-1]} channels, codec wants {codec.latent_channels}")
    return _depth_to_space(T.matmul(z, codec.dec), codec.factor)


def train_codec(codec, stacks, steps=500, lr=1e-2, batch=4, seed=0):
    """Fit the lossy projections by plain reconstruction; returns losses."""
    from himat.diffusion import Adam  # local import to avoid a cycle

    data = np.asarray(stacks, dtype=np.float64)
    rng = np.random.default_rng(seed)
    opt = Adam(codec.parameters(), lr=lr)
    losses = []
    for _ in range(steps):
        idx = rng.integers(0, data.shape[0], size=min(batch, data.shape[0]))
        x = Tensor(data[idx])
        d = T.sub(decode(encode(x, codec), codec), x)
        loss = T.tmean(T.mul(d, d))
        losses.append(loss.item())
        loss.backward()
        opt.step()
        opt.zero_grad()
    return losses


# -- procedural generators --------------------------------------------------------

def _upsample_circular(grid, h, w):
    """Bilinear upsample of a coarse grid with wraparound (tileable)."""
    k0, k1 = grid.shape
    ys = np.arange(h) * k0 / h
    xs = np.arange(w) * k1 / w
    i0 = ys.astype(int) % k0
    j0 = xs.astype(int) % k1
    fy = (ys - np.floor(ys))[:, None]
    fx = (xs - np.floor(xs))[None, :]
    i1 = (i0 + 1) % k0
    j1 = (j0 + 1) % k1
    a = grid[np.ix_(i0, j0)]
    b = grid[np.ix_(i0, j1)]
    c = grid[np.ix_(i1, j0)]
    d = grid[np.ix_(i1, j1)]
    return (a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx + c * fy * (1 - fx) + d * fy * fx)


def _value_noise(rng, h, w, octaves=(4, 8, 16)):
    out = np.zeros((h, w))
    amp = 1.0
    for k in octaves:
        out += amp * _upsample_circular(rng.standard_normal((k, k)), h, w)
        amp *= 0.5
    lo, hi = out.min(), out.max()
    return (out - lo) / (hi - lo) if hi > lo else np.full((h, w), 0.5)


def _height_stripes(rng, h, w):
    fx, fy = int(rng.integers(1, 5)), int(rng.integers(0, 3))
    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    s = 0.5 + 0.5 * np.sin(2 * np.pi * (fx * xx + fy * yy) + rng.uniform(0, 2 * np.pi))
    return np.clip(0.85 * s + 0.15 * _value_noise(rng, h, w), 0.0, 1.0)


def _height_cells(rng, h, w):
    npts = int(rng.integers(4, 9))
    pts = rng.uniform(0, 1, size=(npts, 2))
    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    best = np.full((h, w), np.inf)
    for py, px in pts:
        dy = np.abs(yy - py)
        dx = np.abs(xx - px)
        dy = np.minimum(dy, 1 - dy)  # toroidal
        dx = np.minimum(dx, 1 - dx)
        best = np.minimum(best, dy * dy + dx * dx)
    d = np.sqrt(best)
    d /= d.max() if d.max() > 0 else 1.0
    return np.clip(0.9 * d + 0.1 * _value_noise(rng, h, w), 0.0, 1.0)


def _height_noise(rng, h, w):
    return _value_noise(rng, h, w)


def _height_checker(rng, h, w):
    k = int(rng.choice([2, 4, 8]))
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    board = ((yy * k // h + xx * k // w) % 2).astype(np.float64)
    # circular box blur softens the edges while staying tileable
    for ax in (0, 1):
        board = (np.roll(board, -1, ax) + board + np.roll(board, 1, ax)) / 3.0
    return np.clip(0.85 * board + 0.15 * _value_noise(rng, h, w), 0.0, 1.0)


_FAMILY_FN = {
    "stripes": _height_stripes,
    "cells": _height_cells,
    "noise": _height_noise,
    "checker": _height_checker,
}


def _make_item(seed, index, h, w):
    rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
    family = index % len(PROMPT_FAMILIES)
    height = _FAMILY_FN[PROMPT_FAMILIES[family]](rng, h, w)
    normal = normals_from_height(height, slope_scale=rng.uniform(2.0, 6.0))
    c0 = rng.uniform(0.1, 0.9, size=3)
    c1 = rng.uniform(0.1, 0.9, size=3)
    basecolor = np.clip(c0 + (c1 - c0) * height[..., None], 0.0, 1.0)
    # fixed-sign monotone relations: valleys are rough, peaks metallic,
    # consistently across items (cross-map structure stays learnable)
    r_gain = rng.uniform(0.25, 0.45)
    roughness = np.clip(0.5 + r_gain * (0.5 - height) * 1.6, 0.02, 0.98)
    m_gain = rng.uniform(0.25, 0.45)
    metallic = np.clip(0.5 + m_gain * (height - 0.5) * 1.6, 0.02, 0.98)
    return MaterialSet(basecolor, normal, roughness, metallic, height), family


def synth_dataset(seed, count, h, w):
    """Deterministic procedural materials; item i depends only on (seed, i).

    Returns [(MaterialSet, prompt_id)]; prompt_id indexes PROMPT_FAMILIES.
    HIMAT_THREADS > 1 parallelizes generation without changing content.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    workers = int(os.environ.get("HIMAT_THREADS", "1"))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda i: _make_item(seed, i, h, w), range(count)))
    return [_make_item(seed, i, h, w) for i in range(count)]


# -- augmentation ----------------------------------------------------------------

def flip_horizontal(m):
    """Mirror the W axis; the normal's x component flips sign."""
    normal = m.normal[:, ::-1].copy()
    normal[..., 0] = 1.0 - normal[..., 0]
    return MaterialSet(
        basecolor=m.basecolor[:, ::-1].copy(),
        normal=normal,
        roughness=m.roughness[:, ::-1].copy(),
        metallic=m.metallic[:, ::-1].copy(),
        height=m.height[:, ::-1].copy(),
    )


def flip_vertical(m):
    """Mirror the H axis; the normal's y component flips sign."""
    normal = m.normal[::-1].copy()
    normal[..., 1] = 1.0 - normal[..., 1]
    return MaterialSet(
        basecolor=m.basecolor[::-1].copy(),
        normal=normal,
        roughness=m.roughness[::-1].copy(),
        metallic=m.metallic[::-1].copy(),
        height=m.height[::-1].copy(),
    )


def rotate90(m, k=1):
    """Rotate all maps by k*90 degrees ccw (square images only).

    With x pointing along +W and y along +H, a ccw array rotation maps
    (x, y) -> (y, -x), so the encoded normal channels swap and the new
    y component flips sign.
    """
    h, w = m.hw
    if h != w:
        raise ShapeMismatch("90-degree rotation needs square maps")
    k = k % 4
    out = m
    for _ in range(k):
        normal = np.rot90(out.normal).copy()
        nx, ny = normal[..., 0].copy(), normal[..., 1].copy()
        normal[..., 0] = ny
        normal[..., 1] = 1.0 - nx
        out = MaterialSet(
            basecolor=np.rot90(out.basecolor).copy(),
            normal=normal,
            roughness=np.rot90(out.roughness).copy(),
            metallic=np.rot90(out.metallic).copy(),
            height=np.rot90(out.height).copy(),
        )
    return out


def augment(m, rng):
    """Random flip/flip/rotation, all maps jointly, normals corrected."""
    if rng.random() < 0.5:
        m = flip_horizontal(m)
    if rng.random() < 0.5:
        m = flip_vertical(m)
    if m.hw[0] == m.hw[1]:
        m = rotate90(m, int(rng.integers(0, 4)))
    return m
