"""Dataset ingestion, preprocessing, and a synthetic multitemporal generator.

On-disk layout (16-bit grayscale PNG throughout):

    root/<band>/imgsetNNNN/
        LR000.png, LR001.png, ...   low-resolution frames
        QM000.png, QM001.png, ...   per-frame clearance masks (0 = occluded)
        HR.png, SM.png              optional ground truth + status mask
    root/manifest.csv               scene_id, band, split

Shift convention used everywhere here: applying shift (dy, dx) to a frame
moves its content down/right, out[y, x] = frame[y - dy, x - dx], with zero
fill; mask pixels exposed by the fill are marked occluded. Registration
therefore returns the shift to APPLY to each frame to align it to the
reference (a frame whose content sits at (+2, -1) relative to the reference
gets shift (-2, +1)).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

MAX_INTENSITY = 2**16 - 1


class DatasetError(Exception):
    """Base class for dataset layout/content problems."""


class UnreadableImageError(DatasetError):
    pass


class MissingMaskError(DatasetError):
    pass


class SizeMismatchError(DatasetError):
    pass


@dataclass
class SceneRecord:
    scene_id: str
    band: str
    lr_frames: list[np.ndarray]          # uint16 [H,W], all the same size
    masks: list[np.ndarray]              # bool [H,W], True = clear
    hr: np.ndarray | None = None         # uint16 [rH,rW]
    hr_mask: np.ndarray | None = None    # bool [rH,rW]

    @property
    def n_frames(self) -> int:
        return len(self.lr_frames)

    def clear_fractions(self) -> np.ndarray:
        return np.array([m.mean() for m in self.masks])

    def validate(self) -> None:
        if len(self.masks) != len(self.lr_frames):
            raise MissingMaskError(
                f"{self.scene_id}: {len(self.lr_frames)} frames but {len(self.masks)} masks"
            )
        sizes = {f.shape for f in self.lr_frames}
        if len(sizes) > 1:
            raise SizeMismatchError(f"{self.scene_id}: inconsistent LR sizes {sorted(sizes)}")
        for i, (f, m) in enumerate(zip(self.lr_frames, self.masks)):
            if f.shape != m.shape:
                raise SizeMismatchError(f"{self.scene_id}: frame {i} and its mask differ in size")
        if (self.hr is None) != (self.hr_mask is None):
            raise MissingMaskError(f"{self.scene_id}: HR and SM must be present together")
        if self.hr is not None and self.lr_frames:
            h, w = self.lr_frames[0].shape
            rh, rw = self.hr.shape
            if rh % h or rw % w or rh // h != rw // w:
                raise SizeMismatchError(
                    f"{self.scene_id}: HR size {self.hr.shape} is not an integer multiple of LR {h}x{w}"
                )


@dataclass
class NormalizationStats:
    mean: float
    std: float

    def validate(self) -> None:
        if not self.std > 0:
            raise ValueError(f"std must be positive, got {self.std}")


# ---------------------------------------------------------------------------
# PNG io


def _read_png16(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            arr = np.asarray(img)
    except Exception as exc:
        raise UnreadableImageError(f"cannot read {path}: {exc}") from exc
    return arr.astype(np.uint16)


def _write_png16(path: Path, arr: np.ndarray) -> None:
    Image.fromarray(arr.astype(np.uint16)).save(path, format="PNG")


def load_scene(scene_dir: Path, band: str) -> SceneRecord:
    scene_dir = Path(scene_dir)
    lr_paths = sorted(scene_dir.glob("LR*.png"))
    if not lr_paths:
        raise DatasetError(f"{scene_dir}: no LR frames found")
    frames, masks = [], []
    for lr_path in lr_paths:
        qm_path = scene_dir / lr_path.name.replace("LR", "QM", 1)
        if not qm_path.exists():
            raise MissingMaskError(f"{scene_dir.name}: missing clearance mask for frame {lr_path.name}")
        frames.append(_read_png16(lr_path))
        masks.append(_read_png16(qm_path) > 0)
    hr = hr_mask = None
    hr_path = scene_dir / "HR.png"
    sm_path = scene_dir / "SM.png"
    if hr_path.exists():
        if not sm_path.exists():
            raise MissingMaskError(f"{scene_dir.name}: HR.png present but SM.png missing")
        hr = _read_png16(hr_path)
        hr_mask = _read_png16(sm_path) > 0
    scene = SceneRecord(scene_dir.name, band, frames, masks, hr, hr_mask)
    scene.validate()
    return scene


def load_dataset(root, band: str) -> list[SceneRecord]:
    """Load every scene of a band, ordered deterministically by scene id."""
    band_dir = Path(root) / band
    if not band_dir.is_dir():
        return []
    return [load_scene(d, band) for d in sorted(band_dir.iterdir()) if d.is_dir()]


def save_scene(scene: SceneRecord, root) -> Path:
    scene_dir = Path(root) / scene.band / scene.scene_id
    scene_dir.mkdir(parents=True, exist_ok=True)
    for i, (frame, mask) in enumerate(zip(scene.lr_frames, scene.masks)):
        _write_png16(scene_dir / f"LR{i:03d}.png", frame)
        _write_png16(scene_dir / f"QM{i:03d}.png", mask.astype(np.uint16) * MAX_INTENSITY)
    if scene.hr is not None:
        _write_png16(scene_dir / "HR.png", scene.hr)
        _write_png16(scene_dir / "SM.png", scene.hr_mask.astype(np.uint16) * MAX_INTENSITY)
    return scene_dir


def save_dataset(scenes: list[SceneRecord], root, splits: dict[str, str] | None = None) -> None:
    """Write scenes plus a manifest listing scene ids and split assignment."""
    root = Path(root)
    for scene in scenes:
        save_scene(scene, root)
    with open(root / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scene_id", "band", "split"])
        for scene in scenes:
            split = (splits or {}).get(scene.scene_id, "train")
            writer.writerow([scene.scene_id, scene.band, split])


def load_manifest(root) -> dict[str, str]:
    path = Path(root) / "manifest.csv"
    if not path.exists():
        return {}
    with open(path, newline="") as fh:
        return {row["scene_id"]: row["split"] for row in csv.DictReader(fh)}


# ---------------------------------------------------------------------------
# preprocessing


def filter_clearance(scene: SceneRecord, threshold: float = 0.15, min_frames: int = 1) -> SceneRecord | None:
    """Keep frames whose occluded fraction is strictly below the threshold.

    Returns None (scene skipped) when fewer than ``min_frames`` survive.
    """
    keep = [i for i, m in enumerate(scene.masks) if 1.0 - m.mean() < threshold]
    if len(keep) < min_frames:
        return None
    return replace(
        scene,
        lr_frames=[scene.lr_frames[i] for i in keep],
        masks=[scene.masks[i] for i in keep],
    )


def select_frames(scene: SceneRecord, t: int = 9) -> SceneRecord:
    """Exactly ``t`` frames: clearest first (ties by index), cycled if short."""
    order = sorted(range(scene.n_frames), key=lambda i: (-scene.masks[i].mean(), i))
    chosen = [order[i % len(order)] for i in range(t)]
    return replace(
        scene,
        lr_frames=[scene.lr_frames[i].copy() for i in chosen],
        masks=[scene.masks[i].copy() for i in chosen],
    )


def shift_frame(frame: np.ndarray, shift: tuple[int, int], fill=0) -> np.ndarray:
    """Integer translation with constant fill; see the module shift convention."""
    dy, dx = shift
    out = np.full_like(frame, fill)
    h, w = frame.shape
    ys = slice(max(0, dy), h + min(0, dy))
    xs = slice(max(0, dx), w + min(0, dx))
    ys_src = slice(max(0, -dy), h + min(0, -dy))
    xs_src = slice(max(0, -dx), w + min(0, -dx))
    out[ys, xs] = frame[ys_src, xs_src]
    return out


def _masked_ncc(a: np.ndarray, b: np.ndarray, valid: np.ndarray) -> float:
    n = valid.sum()
    if n < 2:
        return -np.inf
    av = a[valid].astype(np.float64)
    bv = b[valid].astype(np.float64)
    ac = av - av.mean()
    bc = bv - bv.mean()
    denom = np.sqrt((ac * ac).sum() * (bc * bc).sum())
    if denom == 0:
        return -np.inf
    return float((ac * bc).sum() / denom)


def register_translational(scene: SceneRecord, max_shift: int = 4) -> tuple[SceneRecord, list[tuple[int, int]]]:
    """Align frames to the clearest one by exhaustive masked cross-correlation.

    Per frame, every integer shift in [-max_shift, max_shift]² is scored by
    the normalized cross-correlation over jointly clear pixels; ties prefer
    the smallest displacement, then lexicographic order. Shifted-in regions
    are zero-filled and marked occluded.
    """
    fractions = scene.clear_fractions()
    ref_idx = int(np.argmax(fractions))  # argmax takes the first on ties
    ref = scene.lr_frames[ref_idx].astype(np.float64)
    ref_mask = scene.masks[ref_idx]
    new_frames, new_masks, shifts = [], [], []
    for idx, (frame, mask) in enumerate(zip(scene.lr_frames, scene.masks)):
        if idx == ref_idx:
            new_frames.append(frame.copy())
            new_masks.append(mask.copy())
            shifts.append((0, 0))
            continue
        best = None
        for dy in range(-max_shift, max_shift + 1):
            for dx in range(-max_shift, max_shift + 1):
                cand = shift_frame(frame, (dy, dx)).astype(np.float64)
                cand_mask = shift_frame(mask.astype(np.uint8), (dy, dx)) > 0
                score = _masked_ncc(cand, ref, cand_mask & ref_mask)
                key = (-score, dy * dy + dx * dx, dy, dx)
                if best is None or key < best[0]:
                    best = (key, (dy, dx))
        shift = best[1] if np.isfinite(-best[0][0]) else (0, 0)
        new_frames.append(shift_frame(frame, shift))
        new_masks.append(shift_frame(mask.astype(np.uint8), shift) > 0)
        shifts.append(shift)
    return replace(scene, lr_frames=new_frames, masks=new_masks), shifts


def compute_stats(scenes: list[SceneRecord]) -> NormalizationStats:
    """Mean/std over the clear LR pixels of a training split (population std)."""
    total = 0.0
    total_sq = 0.0
    count = 0
    for scene in scenes:
        for frame, mask in zip(scene.lr_frames, scene.masks):
            vals = frame[mask].astype(np.float64)
            total += vals.sum()
            total_sq += (vals * vals).sum()
            count += vals.size
    if count == 0:
        raise DatasetError("no clear pixels to compute normalization stats from")
    mean = total / count
    var = total_sq / count - mean * mean
    if var <= 0:
        raise DatasetError("normalization std is zero; dataset is constant")
    return NormalizationStats(mean=mean, std=float(np.sqrt(var)))


def normalize(images: np.ndarray, stats: NormalizationStats, dtype=np.float32) -> np.ndarray:
    stats.validate()
    return ((np.asarray(images, dtype=np.float64) - stats.mean) / stats.std).astype(dtype)


def denormalize(images: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    stats.validate()
    return np.asarray(images, dtype=np.float64) * stats.std + stats.mean


def write_stats(path, stats: NormalizationStats) -> None:
    Path(path).write_text(f"mean={stats.mean!r}\nstd={stats.std!r}\n")


def read_stats(path) -> NormalizationStats:
    values = {}
    for line in Path(path).read_text().splitlines():
        key, _, raw = line.partition("=")
        if key.strip():
            values[key.strip()] = float(raw)
    return NormalizationStats(mean=values["mean"], std=values["std"])


# ---------------------------------------------------------------------------
# patches and augmentation


@dataclass
class PatchRecord:
    scene_id: str
    index: int
    lr: np.ndarray        # uint16 [T, s, s]
    masks: np.ndarray     # bool [T, s, s]
    hr: np.ndarray        # uint16 [r*s, r*s]
    hr_mask: np.ndarray   # bool [r*s, r*s]


def extract_patches(scene: SceneRecord, size: int = 32, stride: int | None = None) -> list[PatchRecord]:
    """Aligned LR/HR patch pairs from every offset on the stride grid."""
    if scene.hr is None:
        raise DatasetError(f"{scene.scene_id}: patches require HR ground truth")
    stride = stride or size
    h, w = scene.lr_frames[0].shape
    r = scene.hr.shape[0] // h
    lr = np.stack(scene.lr_frames)
    masks = np.stack(scene.masks)
    patches = []
    index = 0
    for y in range(0, h - size + 1, stride):
        for x in range(0, w - size + 1, stride):
            patches.append(
                PatchRecord(
                    scene_id=scene.scene_id,
                    index=index,
                    lr=lr[:, y : y + size, x : x + size].copy(),
                    masks=masks[:, y : y + size, x : x + size].copy(),
                    hr=scene.hr[r * y : r * (y + size), r * x : r * (x + size)].copy(),
                    hr_mask=scene.hr_mask[r * y : r * (y + size), r * x : r * (x + size)].copy(),
                )
            )
            index += 1
    return patches


def rotate_patch(patch: PatchRecord, k: int) -> PatchRecord:
    """Rotate LR stack, masks, and HR consistently by k·90° counterclockwise."""
    k %= 4
    if k == 0:
        return patch
    return PatchRecord(
        scene_id=patch.scene_id,
        index=patch.index,
        lr=np.rot90(patch.lr, k, axes=(1, 2)).copy(),
        masks=np.rot90(patch.masks, k, axes=(1, 2)).copy(),
        hr=np.rot90(patch.hr, k).copy(),
        hr_mask=np.rot90(patch.hr_mask, k).copy(),
    )


# ---------------------------------------------------------------------------
# synthetic scene generator


@dataclass
class SynthConfig:
    n_scenes: int = 16
    frames: int = 5
    lr_size: int = 32
    scale: int = 3
    shift_range: float = 1.0       # max |subpixel shift| per axis, LR pixels
    blur_sigma: float = 1.0        # Gaussian blur in HR pixels
    noise_sigma: float = 0.01      # additive noise std, fraction of full scale
    brightness_range: float = 0.02 # per-frame additive offset, fraction of scale
    occlusion_rate: float = 0.05   # target occluded area fraction per frame
    change_rate: float = 0.15      # probability a frame carries a changed patch
    train_fraction: float = 0.8
    band: str = "synthetic"

    def validate(self) -> None:
        if self.n_scenes < 1 or self.frames < 1 or self.lr_size < 4:
            raise ValueError("n_scenes, frames, lr_size out of range")
        if self.scale < 1:
            raise ValueError("scale must be >= 1")
        if not 0 <= self.occlusion_rate < 1:
            raise ValueError("occlusion_rate must be in [0, 1)")
        if not 0 <= self.change_rate <= 1:
            raise ValueError("change_rate must be in [0, 1]")
        if not 0 < self.train_fraction <= 1:
            raise ValueError("train_fraction must be in (0, 1]")


def _smooth_noise(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    field_ = rng.normal(size=shape)
    field_ = ndimage.gaussian_filter(field_, sigma)
    lo, hi = field_.min(), field_.max()
    return (field_ - lo) / (hi - lo + 1e-12)


def _procedural_hr(rng: np.random.Generator, size: int) -> np.ndarray:
    """Band-limited noise + random polygons + a gradient, in [0.08, 0.92]."""
    base = 0.6 * _smooth_noise(rng, (size, size), sigma=size / 16)
    base += 0.2 * _smooth_noise(rng, (size, size), sigma=size / 48)
    yy, xx = np.mgrid[0:size, 0:size] / size
    gdir = rng.uniform(-1, 1, size=2)
    base += 0.2 * (gdir[0] * yy + gdir[1] * xx)
    for _ in range(rng.integers(2, 6)):
        # random convex polygon as an intersection of half planes
        cy, cx = rng.uniform(0.15, 0.85, size=2) * size
        n_sides = int(rng.integers(3, 6))
        radius = rng.uniform(0.08, 0.25) * size
        angles = np.sort(rng.uniform(0, 2 * np.pi, size=n_sides))
        inside = np.ones((size, size), dtype=bool)
        for a in angles:
            nx, ny = np.cos(a), np.sin(a)
            inside &= (xx * size - cx) * nx + (yy * size - cy) * ny <= radius
        base = np.where(inside, base + rng.uniform(-0.35, 0.35), base)
    lo, hi = base.min(), base.max()
    return 0.08 + 0.84 * (base - lo) / (hi - lo + 1e-12)


def _area_decimate(hr: np.ndarray, r: int) -> np.ndarray:
    h, w = hr.shape
    return hr.reshape(h // r, r, w // r, r).mean(axis=(1, 3))


def _quantize(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * MAX_INTENSITY).astype(np.uint16)


def generate_synthetic(config: SynthConfig, seed: int) -> list[SceneRecord]:
    """Procedural multitemporal scenes; bit-identical for identical seeds.

    Each LR frame is the HR content (optionally locally changed for that
    frame) subpixel-shifted, blurred, area-decimated r×, brightness-offset,
    noised, and quantized to 16 bits. Occlusions zero the clearance mask and
    paint the pixels cloud-bright.
    """
    config.validate()
    rng = np.random.default_rng(np.random.PCG64(seed))
    hr_size = config.lr_size * config.scale
    scenes = []
    for idx in range(config.n_scenes):
        hr_float = _procedural_hr(rng, hr_size)
        hr_q = _quantize(hr_float)
        hr_base = hr_q.astype(np.float64) / MAX_INTENSITY
        frames, masks = [], []
        for _ in range(config.frames):
            content = hr_base
            if rng.uniform() < config.change_rate:
                content = content.copy()
                ph = int(rng.integers(hr_size // 6, hr_size // 3 + 1))
                py = int(rng.integers(0, hr_size - ph + 1))
                px = int(rng.integers(0, hr_size - ph + 1))
                patch = _smooth_noise(rng, (ph, ph), sigma=max(1.0, ph / 6))
                content[py : py + ph, px : px + ph] = 0.15 + 0.7 * patch
            shift = rng.uniform(-config.shift_range, config.shift_range, size=2) * config.scale
            if np.any(shift != 0.0):
                content = ndimage.shift(content, shift, order=1, mode="nearest")
            if config.blur_sigma > 0:
                content = ndimage.gaussian_filter(content, config.blur_sigma, mode="nearest")
            lr = _area_decimate(content, config.scale)
            if config.brightness_range > 0:
                lr = lr + rng.uniform(-config.brightness_range, config.brightness_range)
            if config.noise_sigma > 0:
                lr = lr + rng.normal(scale=config.noise_sigma, size=lr.shape)
            mask = np.ones(lr.shape, dtype=bool)
            if config.occlusion_rate > 0:
                cloud = _smooth_noise(rng, lr.shape, sigma=config.lr_size / 8)
                cut = np.quantile(cloud, 1.0 - config.occlusion_rate)
                occluded = cloud > cut
                mask &= ~occluded
                lr = np.where(occluded, 0.95, lr)
            frames.append(_quantize(lr))
            masks.append(mask)
        scenes.append(
            SceneRecord(
                scene_id=f"imgset{idx:04d}",
                band=config.band,
                lr_frames=frames,
                masks=masks,
                hr=hr_q,
                hr_mask=np.ones(hr_q.shape, dtype=bool),
            )
        )
    return scenes


def synthetic_splits(config: SynthConfig) -> dict[str, str]:
    n_train = int(round(config.n_scenes * config.train_fraction))
    return {
        f"imgset{idx:04d}": ("train" if idx < n_train else "val")
        for idx in range(config.n_scenes)
    }
