"""Full network assembly and parameter management.

Pipeline: shared entry conv (1 -> F) -> stack of feature-attention blocks ->
optional adaptive-filter block -> temporal mean (the invariance point) ->
two parallel heads. The SR head adds a global skip (bilinear upsample of the
temporally averaged input), the uncertainty head does not; it emits the
log-scale map delta, so the Laplacian scale exp(delta) is always positive.

Parameter archives are a flat little-endian binary format: magic, version,
a structured-text config block, then one record per tensor (name, dims,
dtype tag, raw values). Round-trips are bit-exact.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import temporal_ops as tops
from .autodiff import NonFiniteError, ShapeError, Tensor
from .blocks import (
    FeatureBlockConfig,
    FilterBlockConfig,
    adaptive_filter_block,
    feature_attention_block,
    feature_block_shapes,
    filter_block_shapes,
    init_feature_block,
    init_filter_block,
)

ARCHIVE_MAGIC = b"TSRA"
ARCHIVE_VERSION = 1
_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


class ArchiveError(IOError):
    """Parameter archive is truncated, malformed, or of the wrong version."""


class ConfigMismatchError(ValueError):
    """Archive parameters do not fit the expected model configuration."""

    def __init__(self, message: str, offending: list[str]):
        super().__init__(message)
        self.offending = offending


@dataclass
class ModelConfig:
    n_feature_blocks: int = 16
    n_filter_blocks: int = 1
    features: int = 42
    bottleneck: int = 5
    filter_kernel: int = 5
    scale: int = 3
    in_channels: int = 1
    kernel: int = 3
    relu_slope: float = 0.2
    attn_scale_on: str = "temporal"
    dtype: str = "float32"

    def validate(self) -> None:
        if self.n_feature_blocks < 1:
            raise ValueError(f"n_feature_blocks must be >= 1, got {self.n_feature_blocks}")
        if self.n_filter_blocks not in (0, 1):
            raise ValueError(f"n_filter_blocks must be 0 or 1, got {self.n_filter_blocks}")
        if self.scale < 1:
            raise ValueError(f"scale must be >= 1, got {self.scale}")
        if self.kernel % 2 == 0 or self.filter_kernel % 2 == 0:
            raise ValueError("kernel sizes must be odd")
        if self.bottleneck > self.features:
            raise ValueError(f"bottleneck {self.bottleneck} exceeds features {self.features}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.attn_scale_on not in ("temporal", "feature"):
            raise ValueError(f"attn_scale_on must be 'temporal' or 'feature', got {self.attn_scale_on!r}")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def feature_block_config(self) -> FeatureBlockConfig:
        return FeatureBlockConfig(self.features, self.bottleneck, self.kernel,
                                  self.relu_slope, self.attn_scale_on)

    def filter_block_config(self) -> FilterBlockConfig:
        return FilterBlockConfig(self.features, self.filter_kernel, self.kernel,
                                 self.relu_slope, self.attn_scale_on)


@dataclass
class SrOutput:
    """Super-resolved image plus per-pixel log-scale uncertainty map."""

    sr: Tensor      # [B,1,rH,rW]
    delta: Tensor   # [B,1,rH,rW], Laplacian scale is exp(delta) > 0

    def scale_map(self) -> np.ndarray:
        return np.exp(self.delta.data)


def _head_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    f, r, k = cfg.features, cfg.scale, cfg.kernel
    return {
        "up.w": (r * r * f, f, k, k),
        "up.b": (r * r * f,),
        "out.w": (1, f, k, k),
        "out.b": (1,),
    }


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Full name -> shape map for every trainable tensor, in archive order."""
    cfg.validate()
    f, k = cfg.features, cfg.kernel
    shapes: dict[str, tuple[int, ...]] = {
        "entry.w": (f, cfg.in_channels, k, k),
        "entry.b": (f,),
    }
    fb = feature_block_shapes(cfg.feature_block_config())
    for i in range(cfg.n_feature_blocks):
        for name, shape in fb.items():
            shapes[f"block{i}.{name}"] = shape
    if cfg.n_filter_blocks:
        for name, shape in filter_block_shapes(cfg.filter_block_config()).items():
            shapes[f"filter.{name}"] = shape
    for head in ("sr_head", "unc_head"):
        for name, shape in _head_shapes(cfg).items():
            shapes[f"{head}.{name}"] = shape
    return shapes


def count_params(cfg: ModelConfig) -> int:
    """Exact trainable scalar count for the configuration."""
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


def init_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    """Uniform fan-in-scaled weights, zero biases; reproducible from the seed."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    dt = cfg.np_dtype
    f, k = cfg.features, cfg.kernel
    params: dict[str, Tensor] = {
        "entry.w": ad.uniform_fan_in((f, cfg.in_channels, k, k), cfg.in_channels * k * k, rng, dt),
        "entry.b": ad.parameter(np.zeros(f), dtype=dt),
    }
    for i in range(cfg.n_feature_blocks):
        for name, t in init_feature_block(cfg.feature_block_config(), rng, dt).items():
            params[f"block{i}.{name}"] = t
    if cfg.n_filter_blocks:
        for name, t in init_filter_block(cfg.filter_block_config(), rng, dt).items():
            params[f"filter.{name}"] = t
    r = cfg.scale
    for head in ("sr_head", "unc_head"):
        params[f"{head}.up.w"] = ad.uniform_fan_in((r * r * f, f, k, k), f * k * k, rng, dt)
        params[f"{head}.up.b"] = ad.parameter(np.zeros(r * r * f), dtype=dt)
        params[f"{head}.out.w"] = ad.uniform_fan_in((1, f, k, k), f * k * k, rng, dt)
        params[f"{head}.out.b"] = ad.parameter(np.zeros(1), dtype=dt)
    return params


def _subparams(params: dict[str, Tensor], prefix: str) -> dict[str, Tensor]:
    plen = len(prefix)
    return {name[plen:]: t for name, t in params.items() if name.startswith(prefix)}


def _head(pooled: Tensor, params: dict[str, Tensor], prefix: str, cfg: ModelConfig) -> Tensor:
    h = ad.conv2d(pooled, params[f"{prefix}.up.w"], params[f"{prefix}.up.b"])
    h = tops.pixel_shuffle(h, cfg.scale)
    return ad.conv2d(h, params[f"{prefix}.out.w"], params[f"{prefix}.out.b"])


def forward(lr_stack, params: dict[str, Tensor], cfg: ModelConfig) -> SrOutput:
    """Run the network on a [B,T,C,H,W] stack of registered, normalized frames.

    Fully convolutional: any T >= 1 and any H, W are accepted. The output is
    invariant to temporal permutations of ``lr_stack``.
    """
    x = lr_stack if isinstance(lr_stack, Tensor) else Tensor(np.asarray(lr_stack, dtype=cfg.np_dtype))
    if x.ndim != 5:
        raise ShapeError(f"expected [B,T,C,H,W] input, got shape {x.shape}")
    if x.shape[2] != cfg.in_channels:
        raise ShapeError(f"expected {cfg.in_channels} input channels, got {x.shape[2]}")
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteError("non-finite values in input stack")
    expected = param_shapes(cfg)
    if set(expected) != set(params):
        raise ConfigMismatchError(
            "parameter set does not match configuration",
            sorted(set(expected).symmetric_difference(set(params))),
        )

    h = tops.shared_conv2d(x, params["entry.w"], params["entry.b"])
    fb_cfg = cfg.feature_block_config()
    for i in range(cfg.n_feature_blocks):
        h = feature_attention_block(h, _subparams(params, f"block{i}."), fb_cfg)
    if cfg.n_filter_blocks:
        h = adaptive_filter_block(h, _subparams(params, "filter."), cfg.filter_block_config())
    pooled = tops.temporal_mean(h)                    # invariance point

    sr = _head(pooled, params, "sr_head", cfg)
    skip = tops.bilinear_upsample(tops.temporal_mean(x), cfg.scale)
    sr = ad.add(sr, skip)
    delta = _head(pooled, params, "unc_head", cfg)
    return SrOutput(sr=sr, delta=delta)


# ---------------------------------------------------------------------------
# parameter archive


def config_to_text(cfg) -> str:
    lines = [f"{k}={v}" for k, v in asdict(cfg).items()]
    return "\n".join(lines) + "\n"


def config_from_text(text: str, cls=ModelConfig):
    values = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, raw = line.partition("=")
        values[key.strip()] = raw.strip()
    kwargs = {}
    for f_ in cls.__dataclass_fields__.values():
        if f_.name not in values:
            continue
        raw = values[f_.name]
        if f_.type in ("int",):
            kwargs[f_.name] = int(raw)
        elif f_.type in ("float",):
            kwargs[f_.name] = float(raw)
        elif f_.type in ("bool",):
            kwargs[f_.name] = raw.lower() in ("1", "true", "yes")
        else:
            kwargs[f_.name] = raw
    return cls(**kwargs)


def write_archive(path, header_text: str, tensors: dict[str, np.ndarray]) -> None:
    """Write named arrays with a text header; values stored little-endian."""
    with open(path, "wb") as fh:
        fh.write(ARCHIVE_MAGIC)
        fh.write(struct.pack("<I", ARCHIVE_VERSION))
        header = header_text.encode("utf-8")
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            if arr.dtype not in _DTYPE_TAGS:
                raise ArchiveError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(struct.pack("<B", _DTYPE_TAGS[arr.dtype]))
            fh.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def read_archive(path) -> tuple[str, dict[str, np.ndarray]]:
    """Read an archive back; raises ArchiveError on truncation or bad magic."""
    with open(path, "rb") as fh:
        blob = fh.read()
    buf = io.BytesIO(blob)

    def take(n: int, what: str) -> bytes:
        chunk = buf.read(n)
        if len(chunk) != n:
            raise ArchiveError(f"archive truncated while reading {what}")
        return chunk

    if take(4, "magic") != ARCHIVE_MAGIC:
        raise ArchiveError("not a parameter archive (bad magic)")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != ARCHIVE_VERSION:
        raise ArchiveError(f"unsupported archive version {version}")
    (hlen,) = struct.unpack("<I", take(4, "header length"))
    header = take(hlen, "header").decode("utf-8")
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims")) if rank else ()
        (tag,) = struct.unpack("<B", take(1, "dtype tag"))
        if tag not in _TAG_DTYPES:
            raise ArchiveError(f"unknown dtype tag {tag} for tensor {name!r}")
        dtype = _TAG_DTYPES[tag]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if dims else dtype.itemsize
        raw = take(nbytes, f"values of {name!r}")
        arr = np.frombuffer(raw, dtype=dtype.newbyteorder("<")).astype(dtype, copy=True)
        tensors[name] = arr.reshape(dims)
    return header, tensors


def save_params(path, params: dict[str, Tensor], cfg: ModelConfig) -> None:
    write_archive(path, config_to_text(cfg), {name: t.data for name, t in params.items()})


def load_params(path, expected_config: ModelConfig | None = None) -> tuple[dict[str, Tensor], ModelConfig]:
    """Load (params, config); validates against ``expected_config`` if given."""
    header, tensors = read_archive(path)
    cfg = config_from_text(header)
    if expected_config is not None and asdict(expected_config) != asdict(cfg):
        raise ConfigMismatchError("archive config differs from expected config", [])
    shapes = param_shapes(cfg)
    offending = sorted(set(shapes).symmetric_difference(set(tensors)))
    offending += sorted(
        name for name in shapes if name in tensors and tuple(tensors[name].shape) != shapes[name]
    )
    if offending:
        raise ConfigMismatchError(f"archive does not match configuration: {offending}", offending)
    params = {name: ad.parameter(tensors[name]) for name in shapes}
    return params, cfg
