"""Training losses: Laplacian NLL and shift/brightness-insensitive variants.

The registered losses crop the SR prediction by a fixed border and slide the
HR target over all (max_shift+1)² integer offsets; each candidate first
removes the masked mean brightness difference per image, then scores the
Laplacian negative log-likelihood (or plain L1). The minimum over offsets is
the loss; gradients flow through the winning offset only, ties broken by the
lexicographically smallest (u, v).

Losses operate on normalized intensities; the evaluation metrics live in
:mod:`tempsr.metrics` and use the 16-bit scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class EmptyMaskError(ValueError):
    """Every pixel is masked out where a masked mean is required."""


@dataclass
class ShiftSearchConfig:
    max_shift: int = 6   # (u, v) range over {0..max_shift}²
    crop: int = 3        # SR border crop per side

    def validate(self) -> None:
        if self.max_shift < 0 or self.crop < 0:
            raise ValueError("max_shift and crop must be non-negative")
        # cropped SR size is HR size - 2*crop, so every window must fit
        if self.max_shift > 2 * self.crop:
            raise ValueError(
                f"max_shift {self.max_shift} needs crop >= {(self.max_shift + 1) // 2},"
                f" got {self.crop}"
            )


def _as4d(x) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if arr.ndim != 4:
        raise ValueError(f"expected [B,C,H,W], got shape {arr.shape}")
    return arr


def laplace_nll(mu: Tensor, delta: Tensor, hr, mask) -> Tensor:
    """Mean over masked pixels of delta + exp(-delta)·|hr - mu|.

    ``hr`` and ``mask`` are constants (no gradients); masked-out pixels are
    excluded from both the sum and the count.
    """
    hr = np.asarray(hr)
    m = np.asarray(mask).astype(hr.dtype)
    count = float(m.sum())
    if count == 0:
        raise EmptyMaskError("laplace_nll: mask excludes every pixel")
    resid = ad.abs_(ad.sub(ad.Tensor(hr) if not isinstance(hr, Tensor) else hr, mu))
    term = ad.add(delta, ad.mul(ad.exp(ad.neg(delta)), resid))
    total = ad.sum_over_axes(ad.mul(term, m))
    return ad.div(total, count)


def bias_brightness(mu, hr, mask) -> np.ndarray:
    """Per-image brightness bias b = masked mean of (hr - mu); shape [B].

    Adding b to mu zeroes the masked mean residual of each image.
    """
    mu_arr = mu.data if isinstance(mu, Tensor) else np.asarray(mu)
    hr = np.asarray(hr)
    m = np.asarray(mask).astype(hr.dtype)
    counts = m.sum(axis=tuple(range(1, m.ndim)))
    if (counts == 0).any():
        raise EmptyMaskError("bias_brightness: an image is fully occluded")
    num = ((hr - mu_arr) * m).sum(axis=tuple(range(1, m.ndim)))
    return num / counts


def _window_geometry(sr_shape, hr_shape, cfg: ShiftSearchConfig) -> tuple[int, int]:
    cfg.validate()
    _, _, h_sr, w_sr = sr_shape
    _, _, h_hr, w_hr = hr_shape
    h = h_sr - 2 * cfg.crop
    w = w_sr - 2 * cfg.crop
    if h != h_hr - 2 * cfg.crop or w != w_hr - 2 * cfg.crop or h <= 0 or w <= 0:
        raise ValueError(
            f"shift-search geometry mismatch: SR {h_sr}x{w_sr}, HR {h_hr}x{w_hr}, crop {cfg.crop}"
        )
    if cfg.max_shift + h > h_hr or cfg.max_shift + w > w_hr:
        raise ValueError("HR windows exceed the HR extent; check max_shift/crop")
    return h, w


def _branch_loss_arrays(mu_c, delta_c, hr_w, m_w):
    """One (u, v) branch of the registered NLL on plain arrays.

    Mirrors the tensor-graph construction in :func:`registered_nll` line by
    line so the scanned value and the differentiable value agree bitwise.
    Returns +inf when the window mask is empty.
    """
    counts = m_w.sum(axis=(1, 2, 3))
    if (counts == 0).any():
        return np.inf
    b = ((hr_w - mu_c) * m_w).sum(axis=(1, 2, 3)) / counts
    mu_hat = mu_c + b.reshape(-1, 1, 1, 1)
    resid = np.abs(hr_w - mu_hat)
    if delta_c is None:
        term = resid
    else:
        term = delta_c + np.exp(-delta_c) * resid
    return float((term * m_w).sum() / m_w.sum())


def registered_shift_scan(mu, delta, hr, mask, cfg: ShiftSearchConfig):
    """Loss value for every (u, v) offset, plus the argmin.

    Returns (losses [(S+1),(S+1)], (u_best, v_best)). ``delta=None`` scores
    plain L1. Ties resolve to the lexicographically smallest (u, v).
    """
    mu_arr = _as4d(mu)
    hr = _as4d(hr)
    m = _as4d(mask).astype(mu_arr.dtype)
    delta_arr = None if delta is None else _as4d(delta)
    h, w = _window_geometry(mu_arr.shape, hr.shape, cfg)
    c = cfg.crop
    mu_c = mu_arr[:, :, c : c + h, c : c + w]
    delta_c = None if delta_arr is None else delta_arr[:, :, c : c + h, c : c + w]
    s = cfg.max_shift
    losses = np.full((s + 1, s + 1), np.inf)
    for u in range(s + 1):
        for v in range(s + 1):
            hr_w = hr[:, :, u : u + h, v : v + w]
            m_w = m[:, :, u : u + h, v : v + w]
            losses[u, v] = _branch_loss_arrays(mu_c, delta_c, hr_w, m_w)
    if not np.isfinite(losses).any():
        raise EmptyMaskError("registered loss: mask empty for every shift")
    best = int(np.argmin(losses))            # row-major argmin = lexicographic tie-break
    return losses, (best // (s + 1), best % (s + 1))


def _registered_branch(mu: Tensor, delta: Tensor | None, hr, mask, cfg, u, v) -> Tensor:
    """Differentiable loss for one fixed (u, v), same op order as the scan."""
    hr = _as4d(hr)
    mu_dtype = mu.data.dtype
    m = _as4d(mask).astype(mu_dtype)
    h, w = _window_geometry(mu.shape, hr.shape, cfg)
    c = cfg.crop
    mu_c = mu[:, :, c : c + h, c : c + w]
    hr_w = hr[:, :, u : u + h, v : v + w]
    m_w = m[:, :, u : u + h, v : v + w]
    counts = m_w.sum(axis=(1, 2, 3))
    if (counts == 0).any():
        raise EmptyMaskError("registered loss: fully occluded image in chosen window")
    b_num = ad.sum_over_axes(ad.mul(ad.sub(Tensor(hr_w), mu_c), m_w), axes=(1, 2, 3))
    b = ad.div(b_num, counts)
    mu_hat = ad.add(mu_c, ad.reshape(b, (mu.shape[0], 1, 1, 1)))
    resid = ad.abs_(ad.sub(Tensor(hr_w), mu_hat))
    if delta is None:
        term = resid
    else:
        delta_c = delta[:, :, c : c + h, c : c + w]
        term = ad.add(delta_c, ad.mul(ad.exp(ad.neg(delta_c)), resid))
    total = ad.sum_over_axes(ad.mul(term, m_w))
    return ad.div(total, float(m_w.sum()))


def registered_nll(mu: Tensor, delta: Tensor, hr, mask, cfg: ShiftSearchConfig) -> Tensor:
    """Min over all (u, v) of the bias-corrected Laplacian NLL.

    The (u, v) search runs without building graph nodes; the winning branch
    is then rebuilt differentiably, so gradients follow the achieved minimum.
    """
    _, (u, v) = registered_shift_scan(mu, delta, hr, mask, cfg)
    return _registered_branch(mu, delta, hr, mask, cfg, u, v)


def l1_registered(mu: Tensor, hr, mask, cfg: ShiftSearchConfig) -> Tensor:
    """Same machinery with the per-pixel |hr - mu| term only."""
    _, (u, v) = registered_shift_scan(mu, None, hr, mask, cfg)
    return _registered_branch(mu, None, hr, mask, cfg, u, v)
