"""Coarse and fine generators and the additive fusion between them."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .nn import (AttentionBlock, Conv2d, ConvBnAct, DecoderBlock, EncoderBlock, GenResidualBlock, Module)
from .resize import lanczos_resize
from .tensor import Tensor


@dataclass(frozen=True)
class GeneratorConfig:
    scale: int = 64
    base_channels: int = 8
    n_coarse: int = 6
    n_fine: int = 3
    feat_channels: int = 64
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


class _Head(Module):
    """3x3 conv to one channel, tanh."""

    def __init__(self, cin: int, rng: np.random.Generator):
        self.conv = Conv2d(cin, 1, 3, rng, bias=True)

    def forward(self, x: Tensor) -> Tensor:
        return T.tanh(self.conv(T.reflection_pad(x, 1)))


class CoarseGenerator(Module):
    """Half-resolution generator: two encoders, residual trunk, two decoders,
    two mirrored attention skips (encoder 2 -> decoder 1, encoder 1 -> decoder 2)."""

    def __init__(self, base: int, n_res: int, feat_channels: int, rng: np.random.Generator):
        b = base
        self.stem = ConvBnAct(3, b, rng)
        self.enc1 = EncoderBlock(b, rng)
        self.enc2 = EncoderBlock(2 * b, rng)
        self.res = [GenResidualBlock(4 * b, rng) for _ in range(n_res)]
        self.att2 = AttentionBlock(4 * b, rng)
        self.dec1 = DecoderBlock(4 * b, rng)
        self.att1 = AttentionBlock(2 * b, rng)
        self.dec2 = DecoderBlock(2 * b, rng)
        self.proj = Conv2d(b, feat_channels, 1, rng) if b != feat_channels else None
        self.head = _Head(b, rng)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"coarse generator expects N x 3 x H x W, got {x.shape}")
        s = self.stem(x)
        e1 = self.enc1(s)
        e2 = self.enc2(e1)
        h = e2
        for blk in self.res:
            h = blk(h)
        h = self.dec1(h + self.att2(e2))
        h = self.dec2(h + self.att1(e1))
        feat = self.proj(h) if self.proj is not None else h
        return self.head(h), feat


class FineGenerator(Module):
    """Full-resolution generator; coarse features are added after its single encoder."""

    def __init__(self, base: int, n_res: int, feat_channels: int, rng: np.random.Generator):
        fb = max(base // 2, 1)
        width = 2 * fb
        self.feat_channels = feat_channels
        self.stem = ConvBnAct(3, fb, rng)
        self.enc = EncoderBlock(fb, rng)
        self.fuse = Conv2d(feat_channels, width, 1, rng) if feat_channels != width else None
        self.res = [GenResidualBlock(width, rng) for _ in range(n_res)]
        self.att = AttentionBlock(width, rng)
        self.dec = DecoderBlock(width, rng)
        self.head = _Head(fb, rng)

    def forward(self, x: Tensor, coarse_feat: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"fine generator expects N x 3 x H x W, got {x.shape}")
        e = self.enc(self.stem(x))
        expected = (e.shape[0], self.feat_channels, e.shape[2], e.shape[3])
        if tuple(coarse_feat.shape) != expected:
            raise ValueError(f"fusion shape mismatch: coarse features {coarse_feat.shape}, expected {expected}")
        fused = e + (self.fuse(coarse_feat) if self.fuse is not None else coarse_feat)
        h = fused
        for blk in self.res:
            h = blk(h)
        h = self.dec(h + self.att(e))
        return self.head(h)


class GeneratorPair(Module):
    def __init__(self, cfg: GeneratorConfig = GeneratorConfig()):
        if cfg.scale % 16:
            raise ValueError(f"scale must be divisible by 16, got {cfg.scale}")
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 1])
        self.coarse = CoarseGenerator(cfg.base_channels, cfg.n_coarse, cfg.feat_channels, rng)
        self.fine = FineGenerator(cfg.base_channels, cfg.n_fine, cfg.feat_channels, rng)

    def forward(self, fundus: Tensor) -> tuple[Tensor, Tensor]:
        return generate(self, fundus)


def coarse_forward(gen: CoarseGenerator, x_c: Tensor) -> tuple[Tensor, Tensor]:
    return gen(x_c)


def fine_forward(gen: FineGenerator, x_f: Tensor, coarse_feat: Tensor) -> Tensor:
    return gen(x_f, coarse_feat)


def generate(pair: GeneratorPair, fundus: Tensor, fundus_coarse: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Return ``(angio_fine, angio_coarse)``; the coarse input is the Lanczos x1/2 fundus."""
    x_c = lanczos_resize(fundus, 0.5) if fundus_coarse is None else fundus_coarse
    angio_c, feat = pair.coarse(x_c)
    angio_f = pair.fine(fundus, feat)
    return angio_f, angio_c
