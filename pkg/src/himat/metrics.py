"""Desk-scale evaluation metrics: PSNR, a GLCM texture-richness score,
and a cross-map structural consistency score.

The GLCM score is the contrast statistic sum_ij p(i,j) (i-j)^2 of the
normalized symmetric co-occurrence matrix, averaged over the configured
offsets. It rises with texture richness; absolute values are this
library's own definition and not comparable across implementations.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from himat import kernels
from himat.errors import DegenerateMapWarning, ShapeMismatch


def psnr(a, b, peak=1.0):
    """10 log10(peak^2 / MSE); math.inf when the images are identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


@dataclass
class GlcmConfig:
    levels: int = 16
    offsets: tuple = ((0, 1), (1, 0))
    symmetric: bool = True

    def validate(self):
        if self.levels < 2:
            raise ValueError("need at least 2 gray levels")
        if any(dy == 0 and dx == 0 for dy, dx in self.offsets):
            raise ValueError("offsets must be nonzero")
        return self


def glcm_score(img, cfg=None):
    """Mean contrast of the co-occurrence matrices over cfg.offsets.

    img is a grayscale image in [0, 1], quantized to cfg.levels bins
    (value 1.0 falls in the top bin). Constant images score 0; a
    two-level checkerboard scores (levels-1)^2.
    """
    cfg = (cfg or GlcmConfig()).validate()
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ShapeMismatch(f"expected a 2-d grayscale image, got {img.shape}")
    q = np.minimum((img * cfg.levels).astype(np.int32), cfg.levels - 1)
    scores = []
    levels = np.arange(cfg.levels, dtype=np.float64)
    gap2 = (levels[:, None] - levels[None, :]) ** 2
    for dy, dx in cfg.offsets:
        counts = kernels.glcm_counts(q, dy, dx, cfg.levels).astype(np.float64)
        if cfg.symmetric:
            counts = counts + counts.T
        total = counts.sum()
        if total == 0:
            scores.append(0.0)
            continue
        scores.append(float((counts / total * gap2).sum()))
    return float(np.mean(scores))


def _gradient_magnitude(img):
    """Central differences with circular boundary."""
    gx = (np.roll(img, -1, axis=1) - np.roll(img, 1, axis=1)) / 2.0
    gy = (np.roll(img, -1, axis=0) - np.roll(img, 1, axis=0)) / 2.0
    return np.hypot(gx, gy)


def _as_single_channel(arr):
    return arr.mean(axis=-1) if arr.ndim == 3 else arr


def cross_map_consistency(m):
    """Mean Pearson correlation of gradient-magnitude fields over map pairs.

    Lands in [-1, 1]; 1.0 when all maps share identical structure. A map
    with a constant gradient field has no defined correlation: it emits
    DegenerateMapWarning and its pairs count as 0.
    """
    fields = [_gradient_magnitude(_as_single_channel(arr)) for arr in m.maps().values()]
    flats = [f.ravel() for f in fields]
    degenerate = [float(np.std(f)) < 1e-12 for f in flats]
    if any(degenerate):
        warnings.warn("constant gradient field in some map", DegenerateMapWarning)
    corrs = []
    for i in range(len(flats)):
        for j in range(i + 1, len(flats)):
            if degenerate[i] or degenerate[j]:
                corrs.append(0.0)
            else:
                corrs.append(float(np.corrcoef(flats[i], flats[j])[0, 1]))
    return float(np.mean(corrs))
