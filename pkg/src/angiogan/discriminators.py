"""Conditional patch discriminators (two fine, two coarse) with feature taps."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import Conv2d, DiscResidualBlock, EncoderBlock, Module
from .tensor import Tensor

BANK_ORDER = ("d1_f", "d2_f", "d1_c", "d2_c")


@dataclass
class DiscOutput:
    score_map: Tensor
    features: list[Tensor] = field(default_factory=list)


class PatchDiscriminator(Module):
    """Optional 2x average pool, then 3 x (encoder, residual) and a conv score head.

    Input is the channel concatenation of fundus (3) and angiogram (1).
    """

    def __init__(self, base: int, rng: np.random.Generator, pool: bool = False, in_channels: int = 4):
        self.pool = pool
        widths = [base, 2 * base, 4 * base]
        self.enc = []
        self.res = []
        cin = in_channels
        for w in widths:
            self.enc.append(EncoderBlock(cin, rng, cout=w))
            self.res.append(DiscResidualBlock(w, rng))
            cin = w
        self.head = Conv2d(cin, 1, 3, rng, bias=True)

    def forward(self, fundus: Tensor, angio: Tensor) -> DiscOutput:
        if fundus.shape[0] != angio.shape[0] or fundus.shape[2:] != angio.shape[2:]:
            raise ValueError(f"fundus {fundus.shape} and angiogram {angio.shape} are not aligned")
        h = T.concat([fundus, angio], axis=1)
        if self.pool:
            h = T.average_pool(h, 2)
        feats = []
        for enc, res in zip(self.enc, self.res):
            h = enc(h)
            feats.append(h)
            h = res(h)
            feats.append(h)
        score = self.head(T.reflection_pad(h, 1))
        return DiscOutput(score, feats)


def disc_forward(d: PatchDiscriminator, fundus: Tensor, angio: Tensor) -> DiscOutput:
    return d(fundus, angio)


class DiscriminatorBank(Module):
    """Fine pair at scale S and coarse pair at S/2; the D2 variants pool their input."""

    def __init__(self, base: int = 8, seed: int = 0):
        rng = np.random.default_rng([seed, 2])
        self.d1_f = PatchDiscriminator(base, rng, pool=False)
        self.d2_f = PatchDiscriminator(base, rng, pool=True)
        self.d1_c = PatchDiscriminator(base, rng, pool=False)
        self.d2_c = PatchDiscriminator(base, rng, pool=True)

    @property
    def fine(self) -> list[PatchDiscriminator]:
        return [self.d1_f, self.d2_f]

    @property
    def coarse(self) -> list[PatchDiscriminator]:
        return [self.d1_c, self.d2_c]

    def members(self) -> list[tuple[str, PatchDiscriminator]]:
        return [(name, getattr(self, name)) for name in BANK_ORDER]

    def forward(self, fundus_f: Tensor, angio_f: Tensor, fundus_c: Tensor, angio_c: Tensor) -> list[DiscOutput]:
        return bank_forward(self, fundus_f, angio_f, fundus_c, angio_c)


def bank_forward(bank: DiscriminatorBank, fundus_f: Tensor, angio_f: Tensor,
                 fundus_c: Tensor, angio_c: Tensor) -> list[DiscOutput]:
    """Outputs in the fixed order [D1_f, D2_f, D1_c, D2_c]."""
    return [bank.d1_f(fundus_f, angio_f), bank.d2_f(fundus_f, angio_f),
            bank.d1_c(fundus_c, angio_c), bank.d2_c(fundus_c, angio_c)]
