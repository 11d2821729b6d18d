"""Classical reference: bicubic upsampling + registration + temporal averaging.

Bicubic interpolation uses the Catmull-Rom kernel (a = -0.5) with half-pixel
centers and edge clamping. Frames are assumed already registered; the masked
temporal mean drops each frame's occluded pixels, falling back to the
unmasked mean where every frame is occluded.
"""

from __future__ import annotations

import numpy as np

from .data import SceneRecord


def _cubic_kernel(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    at = np.abs(t)
    w = np.where(
        at <= 1,
        (a + 2) * at**3 - (a + 3) * at**2 + 1,
        np.where(at < 2, a * at**3 - 5 * a * at**2 + 8 * a * at - 4 * a, 0.0),
    )
    return w


def _cubic_taps(n_in: int, r: int) -> tuple[np.ndarray, np.ndarray]:
    """Per output index: 4 clamped source indices and Catmull-Rom weights."""
    # half-pixel centers: output i samples input at (i + 0.5)/r - 0.5
    pos = (np.arange(n_in * r) + 0.5) / r - 0.5
    base = np.floor(pos).astype(np.int64)
    frac = pos - base
    offsets = np.arange(-1, 3)
    idx = base[:, None] + offsets[None, :]
    weights = _cubic_kernel(frac[:, None] - offsets[None, :])
    weights /= weights.sum(axis=1, keepdims=True)
    return np.clip(idx, 0, n_in - 1), weights


def bicubic_upsample(img: np.ndarray, r: int) -> np.ndarray:
    """Separable bicubic ×r upsampling of a single [H,W] image."""
    img = np.asarray(img, dtype=np.float64)
    if r == 1:
        return img.copy()
    iy, wy = _cubic_taps(img.shape[0], r)
    ix, wx = _cubic_taps(img.shape[1], r)
    rows = (img[iy, :] * wy[:, :, None]).sum(axis=1)      # [rH, W]
    out = (rows[:, ix] * wx[None, :, :]).sum(axis=2)      # [rH, rW]
    return out


def upsample_mask_nearest(mask: np.ndarray, r: int) -> np.ndarray:
    """Each LR mask pixel expands to an r×r block."""
    return np.repeat(np.repeat(mask, r, axis=0), r, axis=1)


def bicubic_average(scene: SceneRecord, r: int = 3) -> np.ndarray:
    """Masked temporal mean of per-frame bicubic upsamples, on the 16-bit scale."""
    ups = np.stack([bicubic_upsample(f, r) for f in scene.lr_frames])
    masks = np.stack([upsample_mask_nearest(m, r) for m in scene.masks]).astype(np.float64)
    weight = masks.sum(axis=0)
    masked_sum = (ups * masks).sum(axis=0)
    with np.errstate(invalid="ignore"):
        masked_mean = masked_sum / weight
    fallback = ups.mean(axis=0)   # pixels occluded in every frame
    return np.where(weight > 0, masked_mean, fallback)
