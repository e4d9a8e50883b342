"""PNG read/write for float maps in [0, 1], 8- or 16-bit, gray or RGB."""

import cv2
import numpy as np


def write_png(path, img, bit_depth=8):
    """img: float [H,W] or [H,W,3] in [0,1]."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim not in (2, 3) or (img.ndim == 3 and img.shape[2] != 3):
        raise ValueError(f"expected [H,W] or [H,W,3], got {img.shape}")
    if bit_depth == 8:
        scaled = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    elif bit_depth == 16:
        scaled = np.clip(np.rint(img * 65535.0), 0, 65535).astype(np.uint16)
    else:
        raise ValueError(f"bit_depth must be 8 or 16, got {bit_depth}")
    if scaled.ndim == 3:
        scaled = cv2.cvtColor(scaled, cv2.COLOR_RGB2BGR)
    if not cv2.imwrite(str(path), scaled):
        raise OSError(f"failed to write {path}")


def read_png(path):
    """Returns float64 in [0, 1], shape [H,W] or [H,W,3]."""
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise OSError(f"failed to read {path}")
    if raw.ndim == 3:
        if raw.shape[2] == 4:
            raw = raw[:, :, :3]
        raw = cv2.cvtColor(raw, cv2.COLOR_BGR2RGB)
    peak = 65535.0 if raw.dtype == np.uint16 else 255.0
    return raw.astype(np.float64) / peak
