"""Toy visual backbone with gradual feature upsampling, and the dual-encoder heads.

The backbone has three stride-2 stages (G'/2, G'/4, G'/8). Each map is
projected to width ``d`` by a 1x1 lateral. Starting from the deepest map,
every fuse block upsamples the current map 2x and merges it with the next
higher-resolution lateral:

    out = SepConv((w1 * Resize(p_in) + w2 * p_prev) / (w1 + w2 + eps))

where w1, w2 are ReLU-rectified learnable scalars and SepConv is a 3x3
depthwise conv, a 1x1 pointwise conv, a per-position layer norm with learned
per-channel affine, then ReLU.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import BOS, EOS, PAD
from .nn import ParamSet, glorot, linear


class ResolutionError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    raster: int = 32
    channels: int = 3
    widths: tuple[int, int, int] = (16, 32, 64)
    d: int = 64
    eps: float = 1e-4
    target: int = 8

    @property
    def resolutions(self) -> tuple[int, int, int]:
        r = self.raster
        return r // 2, r // 4, r // 8

    @property
    def n_fuse(self) -> int:
        if self.target not in self.resolutions:
            raise ResolutionError(f"target resolution {self.target} not in {self.resolutions}")
        return self.resolutions[::-1].index(self.target)


@dataclass
class FeatureMap:
    tensor: Tensor  # (B, H, H, d)
    resolution: int

    def flatten(self) -> Tensor:
        B, H, W, d = self.tensor.shape
        return ad.reshape(self.tensor, (B, H * W, d))


class ImageEncoderParams(ParamSet):
    def __init__(self, config: EncoderConfig, rng: np.random.Generator, n_fuse: int | None = None):
        super().__init__()
        self.config = config
        self.n_fuse = config.n_fuse if n_fuse is None else n_fuse
        c, d = config, config.d
        cin = c.channels
        for k, cout in enumerate(c.widths, start=1):
            self.add(f"stage{k}.w", glorot(rng, (3, 3, cin, cout), 9 * cin, 9 * cout))
            self.add(f"stage{k}.b", np.zeros(cout))
            cin = cout
        levels = [3] + [3 - j for j in range(1, self.n_fuse + 1)]
        for k in levels:
            width = c.widths[k - 1]
            self.add(f"lateral{k}.w", glorot(rng, (width, d), width, d))
            self.add(f"lateral{k}.b", np.zeros(d))
        for j in range(1, self.n_fuse + 1):
            self.add(f"fuse{j}.w1", np.ones(1))
            self.add(f"fuse{j}.w2", np.ones(1))
            self.add(f"fuse{j}.dw", glorot(rng, (3, 3, d), 9, 9))
            self.add(f"fuse{j}.pw", glorot(rng, (d, d), d, d))
            self.add(f"fuse{j}.pb", np.zeros(d))
            self.add(f"fuse{j}.ln_g", np.ones(d))
            self.add(f"fuse{j}.ln_b", np.zeros(d))

    @property
    def reachable(self) -> tuple[int, ...]:
        return self.config.resolutions[::-1][: self.n_fuse + 1]


def _as_images(render) -> Tensor:
    t = render if isinstance(render, Tensor) else Tensor(render)
    return ad.reshape(t, (1, *t.shape)) if t.ndim == 3 else t


def backbone(images: Tensor, params: ImageEncoderParams) -> list[Tensor]:
    """Three stride-2 conv + ReLU stages; returns maps at G'/2, G'/4, G'/8."""
    maps, x = [], images
    for k in (1, 2, 3):
        x = ad.relu(ad.add(ad.conv2d(x, params[f"stage{k}.w"], stride=2, padding=1),
                           params[f"stage{k}.b"]))
        maps.append(x)
    return maps


def lateral(x: Tensor, params: ImageEncoderParams, level: int) -> FeatureMap:
    return FeatureMap(linear(x, params[f"lateral{level}.w"], params[f"lateral{level}.b"]),
                      x.shape[1])


def fuse_weights(w1: Tensor, w2: Tensor) -> tuple[Tensor, Tensor]:
    return ad.relu(w1), ad.relu(w2)


def fuse_premix(p_in: FeatureMap, p_prev: FeatureMap, w1: Tensor, w2: Tensor, eps: float) -> Tensor:
    """Normalised weighted mix before the separable convolution."""
    if p_prev.resolution != 2 * p_in.resolution:
        raise ResolutionError(f"fuse: p_prev resolution {p_prev.resolution} is not "
                              f"2x p_in resolution {p_in.resolution}")
    if p_in.tensor.shape[-1] != p_prev.tensor.shape[-1]:
        raise ad.ShapeError(f"fuse: widths differ, {p_in.tensor.shape} vs {p_prev.tensor.shape}")
    r1, r2 = fuse_weights(w1, w2)
    denom = ad.add(ad.add(r1, r2), eps)
    if float(denom.data[0]) == 0.0:
        raise ZeroDivisionError("fuse: both fusion weights rectify to 0 and eps is 0")
    mixed = ad.add(ad.mul(ad.upsample2x(p_in.tensor), r1), ad.mul(p_prev.tensor, r2))
    return ad.div(mixed, denom)


def sep_conv(x: Tensor, params: ImageEncoderParams, block: int) -> Tensor:
    p = f"fuse{block}."
    y = ad.depthwise_conv2d(x, params[p + "dw"])
    y = linear(y, params[p + "pw"], params[p + "pb"])
    y = ad.layer_norm(y, params[p + "ln_g"], params[p + "ln_b"])
    return ad.relu(y)


def fuse(p_in: FeatureMap, p_prev: FeatureMap, params: ImageEncoderParams, block: int) -> FeatureMap:
    pre = fuse_premix(p_in, p_prev, params[f"fuse{block}.w1"], params[f"fuse{block}.w2"],
                      params.config.eps)
    return FeatureMap(sep_conv(pre, params, block), p_prev.resolution)


def encode_image(render, params: ImageEncoderParams, target_resolution: int | None = None) -> FeatureMap:
    """phi(x): the deepest map, upsampled by chained fuse blocks to ``target_resolution``."""
    target = params.config.target if target_resolution is None else target_resolution
    if target not in params.reachable:
        raise ResolutionError(f"resolution {target} unreachable; reachable: {sorted(params.reachable)}")
    maps = backbone(_as_images(render), params)
    current = lateral(maps[2], params, 3)
    block = 0
    while current.resolution != target:
        block += 1
        level = 3 - block
        current = fuse(current, lateral(maps[level - 1], params, level), params, block)
    return current


# ---------------------------------------------------------------- dual encoder

@dataclass(frozen=True)
class DualEncoderConfig:
    encoder: EncoderConfig = EncoderConfig()
    vocab_size: int = 22
    embed_dim: int = 64


class DualEncoderParams(ParamSet):
    """Fast model: its own backbone, a pooled linear image head, and a BoW text table."""

    def __init__(self, config: DualEncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        enc_cfg = config.encoder
        self.encoder = ImageEncoderParams(enc_cfg, rng, n_fuse=0)
        for k, t in self.encoder.params.items():
            self.params["enc." + k] = t
        d, e = enc_cfg.d, config.embed_dim
        self.add("head.w", glorot(rng, (d, e), d, e))
        self.add("head.b", np.zeros(e))
        self.add("text.table", glorot(rng, (config.vocab_size, e), config.vocab_size, e))


def embed_image(render, params: DualEncoderParams) -> Tensor:
    """f(x) = linear(global-average-pool(deepest feature map)), shape (B, e)."""
    deepest = encode_image(render, params.encoder, params.encoder.config.resolutions[2])
    pooled = ad.mean(deepest.tensor, axis=(1, 2))
    return linear(pooled, params["head.w"], params["head.b"])


def bow_matrix(captions: Sequence[Sequence[int]], vocab_size: int) -> np.ndarray:
    """Row i holds the normalised token histogram of caption i, specials removed."""
    out = np.zeros((len(captions), vocab_size))
    for i, toks in enumerate(captions):
        content = [t for t in toks if t not in (PAD, BOS, EOS)]
        if not content:
            raise ValueError(f"caption {i} has no content tokens")
        for t in content:
            if not 0 <= t < vocab_size:
                raise ValueError(f"token id {t} outside vocabulary of size {vocab_size}")
            out[i, t] += 1.0
        out[i] /= len(content)
    return out


def embed_text(captions: Sequence[Sequence[int]], params: DualEncoderParams) -> Tensor:
    """g(y) = mean of the table rows of the content tokens, shape (B, e)."""
    return ad.matmul(Tensor(bow_matrix(captions, params.config.vocab_size)), params["text.table"])
