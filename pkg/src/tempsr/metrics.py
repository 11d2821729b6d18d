"""Evaluation metrics on the 16-bit intensity scale: cPSNR and a cSSIM variant.

cPSNR maximizes 10·log10(MAX²/MSE) over all integer HR offsets
(u, v) ∈ {0..max_shift}², after removing the masked mean brightness
difference. A perfect reconstruction yields the +inf sentinel. The SSIM
variant evaluates a standard Gaussian-windowed SSIM at the shift and bias
chosen by cPSNR, averaged over clear pixels.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .losses import EmptyMaskError, ShiftSearchConfig

MAX_INTENSITY = 2**16 - 1


@dataclass
class CpsnrResult:
    value_db: float  # math.inf when the best-shift MSE is exactly zero
    u: int
    v: int
    bias: float


def _as2d(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 4 and arr.shape[0] == 1 and arr.shape[1] == 1:
        arr = arr[0, 0]
    if arr.ndim != 2:
        raise ValueError(f"metrics expect a single [H,W] image, got shape {np.asarray(x).shape}")
    return arr


def _crop_geometry(sr: np.ndarray, hr: np.ndarray, cfg: ShiftSearchConfig) -> tuple[int, int]:
    cfg.validate()
    h = sr.shape[0] - 2 * cfg.crop
    w = sr.shape[1] - 2 * cfg.crop
    if h != hr.shape[0] - 2 * cfg.crop or w != hr.shape[1] - 2 * cfg.crop or h <= 0:
        raise ValueError(f"metric geometry mismatch: SR {sr.shape}, HR {hr.shape}, crop {cfg.crop}")
    return h, w


def cpsnr(sr, hr, mask, cfg: ShiftSearchConfig | None = None) -> CpsnrResult:
    """Corrected PSNR: max over shifts of the bias-insensitive masked PSNR.

    Ties resolve to the lexicographically smallest (u, v); an exactly zero
    MSE yields value_db = +inf (rendered as "inf" in reports).
    """
    cfg = cfg or ShiftSearchConfig()
    sr = _as2d(sr)
    hr = _as2d(hr)
    m = _as2d(mask)
    h, w = _crop_geometry(sr, hr, cfg)
    c = cfg.crop
    sr_c = sr[c : c + h, c : c + w]
    best = None
    any_valid = False
    for u in range(cfg.max_shift + 1):
        for v in range(cfg.max_shift + 1):
            hr_w = hr[u : u + h, v : v + w]
            m_w = m[u : u + h, v : v + w]
            count = m_w.sum()
            if count == 0:
                continue
            any_valid = True
            b = ((hr_w - sr_c) * m_w).sum() / count
            mse = (((hr_w - (sr_c + b)) * m_w) ** 2).sum() / count
            value = math.inf if mse == 0.0 else 10.0 * math.log10(MAX_INTENSITY**2 / mse)
            if best is None or value > best.value_db:
                best = CpsnrResult(value, u, v, float(b))
    if not any_valid:
        raise EmptyMaskError("cpsnr: mask empty for every shift")
    return best


def psnr_from_mse(mse: float) -> float:
    return math.inf if mse == 0.0 else 10.0 * math.log10(MAX_INTENSITY**2 / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2 * sigma**2))
    g /= g.sum()
    return g


def _windowed_mean(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    """Valid-mode separable correlation with a 1-D window along both axes."""
    k = win.size
    h, w = img.shape
    rows = np.zeros((h, w - k + 1))
    for i in range(k):
        rows += win[i] * img[:, i : i + w - k + 1]
    out = np.zeros((h - k + 1, w - k + 1))
    for i in range(k):
        out += win[i] * rows[i : i + h - k + 1]
    return out


def ssim_map(a: np.ndarray, b: np.ndarray, window_size: int = 11, sigma: float = 1.5,
             dynamic_range: float = MAX_INTENSITY) -> np.ndarray:
    """SSIM over all fully interior windows; output is smaller by window-1."""
    if a.shape != b.shape:
        raise ValueError(f"ssim_map shapes differ: {a.shape} vs {b.shape}")
    if min(a.shape) < window_size:
        raise ValueError(f"images smaller than the {window_size}x{window_size} SSIM window")
    win = _gaussian_window(window_size, sigma)
    c1 = (0.01 * dynamic_range) ** 2
    c2 = (0.03 * dynamic_range) ** 2
    mu_a = _windowed_mean(a, win)
    mu_b = _windowed_mean(b, win)
    var_a = _windowed_mean(a * a, win) - mu_a**2
    var_b = _windowed_mean(b * b, win) - mu_b**2
    cov = _windowed_mean(a * b, win) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return num / den


def cssim(sr, hr, mask, cfg: ShiftSearchConfig | None = None, window_size: int = 11) -> float:
    """Mean SSIM over clear pixels at the shift and bias chosen by cPSNR."""
    cfg = cfg or ShiftSearchConfig()
    sr = _as2d(sr)
    hr = _as2d(hr)
    m = _as2d(mask)
    res = cpsnr(sr, hr, m, cfg)
    h, w = _crop_geometry(sr, hr, cfg)
    c = cfg.crop
    sr_al = sr[c : c + h, c : c + w] + res.bias
    hr_al = hr[res.u : res.u + h, res.v : res.v + w]
    m_al = m[res.u : res.u + h, res.v : res.v + w]
    smap = ssim_map(sr_al, hr_al, window_size)
    off = (window_size - 1) // 2
    m_interior = m_al[off : off + smap.shape[0], off : off + smap.shape[1]]
    count = m_interior.sum()
    if count == 0:
        raise EmptyMaskError("cssim: no clear pixels inside the SSIM interior")
    return float((smap * m_interior).sum() / count)


@dataclass
class SceneScore:
    scene_id: str
    cpsnr: float
    cssim: float
    u: int
    v: int
    bias: float


@dataclass
class EvalReport:
    band: str
    scores: list[SceneScore]

    def mean_cpsnr(self) -> float:
        return float(np.mean([s.cpsnr for s in self.scores]))

    def mean_cssim(self) -> float:
        return float(np.mean([s.cssim for s in self.scores]))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["scene_id", "cpsnr", "cssim", "u", "v", "bias"])
            for s in self.scores:
                writer.writerow([s.scene_id, repr(s.cpsnr), repr(s.cssim), s.u, s.v, repr(s.bias)])

    @classmethod
    def read_csv(cls, path, band: str = "") -> "EvalReport":
        scores = []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                scores.append(
                    SceneScore(
                        row["scene_id"],
                        float(row["cpsnr"]),
                        float(row["cssim"]),
                        int(row["u"]),
                        int(row["v"]),
                        float(row["bias"]),
                    )
                )
        return cls(band=band, scores=scores)
