"""Composite equivariant blocks: residual feature attention and adaptive filtering.

Both blocks map [B,T,F,H,W] -> [B,T,F,H,W] and commute with temporal
permutations. The feature-attention block rescales its residual branch by
per-feature scores pooled over space and time (the scores themselves are
permutation-invariant). The adaptive-filter block predicts one normalized
K×K spatial kernel per temporal slice and filters the slice with it, a
learned registration/interpolation step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import temporal_ops as tops
from .autodiff import ShapeError, Tensor


@dataclass
class FeatureBlockConfig:
    features: int = 42
    bottleneck: int = 5
    kernel: int = 3
    relu_slope: float = 0.2
    attn_scale_on: str = "temporal"

    def validate(self) -> None:
        if self.bottleneck > self.features:
            raise ValueError(f"bottleneck {self.bottleneck} exceeds feature count {self.features}")
        if self.kernel % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {self.kernel}")


@dataclass
class FilterBlockConfig:
    features: int = 42
    kernel_size: int = 5
    conv_kernel: int = 3
    relu_slope: float = 0.2
    attn_scale_on: str = "temporal"

    def validate(self) -> None:
        if self.kernel_size % 2 == 0:
            raise ValueError(f"dynamic kernel size must be odd, got {self.kernel_size}")
        if self.conv_kernel % 2 == 0:
            raise ValueError(f"conv kernel size must be odd, got {self.conv_kernel}")


def feature_block_shapes(cfg: FeatureBlockConfig) -> dict[str, tuple[int, ...]]:
    f, b, k = cfg.features, cfg.bottleneck, cfg.kernel
    return {
        "conv1.w": (f, f, k, k),
        "conv1.b": (f,),
        "attn.wq": (f, f),
        "attn.wk": (f, f),
        "attn.wv": (f, f),
        "conv2.w": (f, f, k, k),
        "conv2.b": (f,),
        "fc1.w": (f, b),
        "fc1.b": (b,),
        "fc2.w": (b, f),
        "fc2.b": (f,),
    }


def filter_block_shapes(cfg: FilterBlockConfig) -> dict[str, tuple[int, ...]]:
    f, k, ck = cfg.features, cfg.kernel_size, cfg.conv_kernel
    return {
        "conv.w": (f, f, ck, ck),
        "conv.b": (f,),
        "attn.wq": (f, f),
        "attn.wk": (f, f),
        "attn.wv": (f, f),
        "kernel.w": (f, k * k),
        "kernel.b": (k * k,),
    }


def _check_params(params: dict[str, Tensor], shapes: dict[str, tuple[int, ...]], who: str) -> None:
    missing = sorted(set(shapes) - set(params))
    if missing:
        raise ShapeError(f"{who}: missing parameters {missing}")
    bad = [f"{n} (got {tuple(params[n].shape)}, want {shapes[n]})" for n in shapes if tuple(params[n].shape) != shapes[n]]
    if bad:
        raise ShapeError(f"{who}: mis-shaped parameters: " + "; ".join(bad))


def feature_attention_block(x: Tensor, params: dict[str, Tensor], cfg: FeatureBlockConfig) -> Tensor:
    """Residual block: conv -> temporal attention -> conv, rescaled per feature.

    The scores pass through a mean over space AND time, so they are invariant
    to temporal permutation while the block output stays equivariant.
    """
    _check_params(params, feature_block_shapes(cfg), "feature_attention_block")
    if x.shape[2] != cfg.features:
        raise ShapeError(f"input has {x.shape[2]} features, block configured for {cfg.features}")
    h = tops.shared_conv2d(x, params["conv1.w"], params["conv1.b"])
    h = ad.leaky_relu(h, cfg.relu_slope)
    h = tops.temporal_self_attention(h, params["attn.wq"], params["attn.wk"], params["attn.wv"],
                                     scale_on=cfg.attn_scale_on)
    c = tops.shared_conv2d(h, params["conv2.w"], params["conv2.b"])

    s = feature_block_scores(c, params, cfg)                      # [B,F]
    b = x.shape[0]
    s5 = ad.reshape(s, (b, 1, cfg.features, 1, 1))
    return ad.add(x, ad.mul(s5, c))


def feature_block_scores(c: Tensor, params: dict[str, Tensor], cfg: FeatureBlockConfig) -> Tensor:
    """Per-feature gate in (0,1)^F from the global space-and-time mean of c."""
    pooled = ad.mean_over_axes(c, axes=(1, 3, 4))                 # [B,F]
    z = ad.add(ad.matmul(pooled, params["fc1.w"]), params["fc1.b"])
    z = ad.leaky_relu(z, cfg.relu_slope)
    z = ad.add(ad.matmul(z, params["fc2.w"]), params["fc2.b"])
    return ad.sigmoid(z)


def adaptive_filter_block(x: Tensor, params: dict[str, Tensor], cfg: FilterBlockConfig) -> Tensor:
    """Predict a normalized K×K kernel per temporal slice and filter the input.

    Kernels are softmax-normalized over their K² taps so each predicted
    filter has unit mass, acting as a learned interpolation/registration
    filter. Permuting input slices permutes kernels and outputs alike.
    """
    _check_params(params, filter_block_shapes(cfg), "adaptive_filter_block")
    if x.shape[2] != cfg.features:
        raise ShapeError(f"input has {x.shape[2]} features, block configured for {cfg.features}")
    kernels = predict_filter_kernels(x, params, cfg)
    return tops.dynamic_conv2d(x, kernels)


def predict_filter_kernels(x: Tensor, params: dict[str, Tensor], cfg: FilterBlockConfig) -> Tensor:
    """Kernel branch: conv -> attention -> spatial mean -> linear -> softmax."""
    b, t = x.shape[0], x.shape[1]
    k = cfg.kernel_size
    h = tops.shared_conv2d(x, params["conv.w"], params["conv.b"])
    h = ad.leaky_relu(h, cfg.relu_slope)
    h = tops.temporal_self_attention(h, params["attn.wq"], params["attn.wk"], params["attn.wv"],
                                     scale_on=cfg.attn_scale_on)
    pooled = ad.mean_over_axes(h, axes=(3, 4))                    # [B,T,F]
    logits = ad.add(ad.matmul(pooled, params["kernel.w"]), params["kernel.b"])
    weights = ad.softmax_rows(logits)                             # [B,T,K²], rows sum to 1
    return ad.reshape(weights, (b, t, k, k))


def init_feature_block(cfg: FeatureBlockConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    f, bneck, k = cfg.features, cfg.bottleneck, cfg.kernel
    return {
        "conv1.w": ad.uniform_fan_in((f, f, k, k), f * k * k, rng, dtype),
        "conv1.b": ad.parameter(np.zeros(f), dtype=dtype),
        "attn.wq": ad.uniform_fan_in((f, f), f, rng, dtype),
        "attn.wk": ad.uniform_fan_in((f, f), f, rng, dtype),
        "attn.wv": ad.uniform_fan_in((f, f), f, rng, dtype),
        "conv2.w": ad.uniform_fan_in((f, f, k, k), f * k * k, rng, dtype),
        "conv2.b": ad.parameter(np.zeros(f), dtype=dtype),
        "fc1.w": ad.uniform_fan_in((f, bneck), f, rng, dtype),
        "fc1.b": ad.parameter(np.zeros(bneck), dtype=dtype),
        "fc2.w": ad.uniform_fan_in((bneck, f), bneck, rng, dtype),
        "fc2.b": ad.parameter(np.zeros(f), dtype=dtype),
    }


def init_filter_block(cfg: FilterBlockConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    f, k, ck = cfg.features, cfg.kernel_size, cfg.conv_kernel
    return {
        "conv.w": ad.uniform_fan_in((f, f, ck, ck), f * ck * ck, rng, dtype),
        "conv.b": ad.parameter(np.zeros(f), dtype=dtype),
        "attn.wq": ad.uniform_fan_in((f, f), f, rng, dtype),
        "attn.wk": ad.uniform_fan_in((f, f), f, rng, dtype),
        "attn.wv": ad.uniform_fan_in((f, f), f, rng, dtype),
        "kernel.w": ad.uniform_fan_in((f, k * k), f, rng, dtype),
        "kernel.b": ad.parameter(np.zeros(k * k), dtype=dtype),
    }
