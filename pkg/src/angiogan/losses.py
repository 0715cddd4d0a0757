"""Hinge adversarial, reconstruction, perceptual and feature-matching losses."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .discriminators import DiscOutput
from .nn import LEAKY_SLOPE
from .tensor import DTYPE, Tensor


class MisalignedFeaturesError(RuntimeError):
    """Real and fake discriminator outputs do not pair up layer by layer."""


@dataclass(frozen=True)
class LossWeights:
    lambda_adv: float = 10.0
    lambda_rec: float = 10.0
    lambda_perc: float = 10.0
    lambda_fm: float = 1.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ValueError(f"{name} must be nonnegative, got {value}")


def _scalar(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.float32(x))


def hinge_d_loss(real_scores: Sequence[Tensor], fake_scores: Sequence[Tensor]) -> Tensor:
    """Average over discriminators of mean(relu(1 - real)) + mean(relu(1 + fake)).

    ``fake_scores`` should come from detached generator outputs.
    """
    if not real_scores or not fake_scores:
        raise ValueError("hinge_d_loss needs at least one score map on each side")
    if len(real_scores) != len(fake_scores):
        raise ValueError("real and fake score lists must be aligned")
    terms = [T.mean(T.relu(1.0 - r)) + T.mean(T.relu(1.0 + f)) for r, f in zip(real_scores, fake_scores)]
    return _average(terms)


def hinge_g_loss(fake_scores: Sequence[Tensor]) -> Tensor:
    if not fake_scores:
        raise ValueError("hinge_g_loss needs at least one score map")
    return -_average([T.mean(f) for f in fake_scores])


def _average(terms: list[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms)) if len(terms) > 1 else total


def adv_total(d_loss, g_loss, w: LossWeights = LossWeights()) -> Tensor:
    return _scalar(d_loss) + _scalar(g_loss) * w.lambda_adv


def reconstruction_loss(fake: Tensor, real: Tensor) -> Tensor:
    """Squared L2 distance divided by the element count."""
    if fake.shape != real.shape:
        raise ValueError(f"shape mismatch {fake.shape} vs {real.shape}")
    return T.mean(T.square(fake - real))


def _mean_abs_diff(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"feature shape mismatch {a.shape} vs {b.shape}")
    return T.mean(T.tabs(a - b))


class PerceptualExtractor:
    """Fixed conv stack: ``len(widths)`` stages of 3x3 stride-2 conv + leaky-relu.

    Weights are deterministic from ``seed`` (He-normal) or loaded from an archive
    with entries ``stage{i}.weight``. They never require gradients.
    """

    def __init__(self, widths: Sequence[int] = (32, 64, 128), in_channels: int = 3, seed: int = 1234,
                 weights: Optional[list[np.ndarray]] = None):
        if weights is None:
            rng = np.random.default_rng([seed, 3])
            weights = []
            cin = in_channels
            for w in widths:
                std = np.sqrt(2.0 / (cin * 9))
                weights.append(rng.normal(0.0, std, size=(w, cin, 3, 3)).astype(DTYPE))
                cin = w
        self.weights = [Tensor(np.asarray(w, dtype=DTYPE)) for w in weights]
        self.in_channels = self.weights[0].shape[1]
        self.seed = seed

    @classmethod
    def from_archive(cls, path) -> "PerceptualExtractor":
        from .checkpoint import load_archive
        arrays, _ = load_archive(path)
        n = len([k for k in arrays if k.startswith("stage") and k.endswith(".weight")])
        if n == 0:
            raise ValueError(f"{path}: no stage<i>.weight entries")
        return cls(weights=[arrays[f"stage{i}.weight"] for i in range(n)])

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {f"stage{i}.weight": w.data for i, w in enumerate(self.weights)}

    @property
    def out_width(self) -> int:
        return self.weights[-1].shape[0]

    def fingerprint(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for w in self.weights:
            h.update(w.data.tobytes())
        return h.hexdigest()[:16]

    def features(self, img: Tensor) -> list[Tensor]:
        if img.shape[1] == 1 and self.in_channels != 1:
            img = T.concat([img] * self.in_channels, axis=1)
        feats = []
        h = img
        for w in self.weights:
            h = T.leaky_relu(T.conv2d(T.reflection_pad(h, 1), w, stride=2), LEAKY_SLOPE)
            feats.append(h)
        return feats

    def __call__(self, img: Tensor) -> list[Tensor]:
        return self.features(img)


def perceptual_loss(fake: Tensor, real: Tensor, ex: PerceptualExtractor) -> Tensor:
    """(1/M) * sum over the M extractor stages of mean |F_i(real) - F_i(fake)|."""
    if fake.shape != real.shape:
        raise ValueError(f"shape mismatch {fake.shape} vs {real.shape}")
    ff = ex(fake)
    fr = [f.detach() for f in ex(real.detach())]
    total = None
    for a, b in zip(fr, ff):
        d = _mean_abs_diff(a, b)
        total = d if total is None else total + d
    return total * (1.0 / len(ff))


def feature_matching_loss(outputs_real: Sequence[DiscOutput], outputs_fake: Sequence[DiscOutput],
                          detach_real: bool = True) -> Tensor:
    """(1/N) * sum over discriminators and their N feature layers of mean |real - fake|."""
    if len(outputs_real) != len(outputs_fake) or not outputs_real:
        raise MisalignedFeaturesError("feature matching needs aligned, nonempty discriminator outputs")
    n_layers = len(outputs_real[0].features)
    total = None
    for r, f in zip(outputs_real, outputs_fake):
        if len(r.features) != len(f.features) or len(r.features) != n_layers:
            raise MisalignedFeaturesError("feature lists of the discriminators are misaligned")
        for a, b in zip(r.features, f.features):
            d = _mean_abs_diff(a.detach() if detach_real else a, b)
            total = d if total is None else total + d
    return total * (1.0 / n_layers)


def total_objective(adv, rec, fm, perc, w: LossWeights = LossWeights()) -> Tensor:
    return (_scalar(adv) + _scalar(rec) * w.lambda_rec + _scalar(fm) * w.lambda_fm
            + _scalar(perc) * w.lambda_perc)
