"""FID and KID over pluggable embeddings, plus the distortion-robustness score table."""
from __future__ import annotations

import math

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .data import DISTORTION_KINDS, DistortionSpec, ImagePair, default_distortions, denormalize, distort, \
    fundus_batch, normalize
from .generators import GeneratorPair, generate
from .losses import PerceptualExtractor
from .tensor import DTYPE, Tensor

COLUMN_LABELS = {"orig": "Orig.", "noise": "Noise", "blur": "Blur", "sharpen": "Sharp",
                 "whirl": "Whirl", "pinch": "Pinch"}
EMBEDDER_NOTE = ("scores use a fixed random-weight embedder; they are comparable with each other, "
                 "not with values computed on a pretrained classifier")


@dataclass
class EmbeddingSet:
    matrix: np.ndarray
    source: str = "real"
    fingerprint: str = ""

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=DTYPE)
        if self.matrix.ndim != 2:
            raise ValueError(f"embedding matrix must be 2-D, got shape {self.matrix.shape}")
        if not np.isfinite(self.matrix).all():
            raise ValueError("embedding matrix contains non-finite rows")

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def d(self) -> int:
        return self.matrix.shape[1]


@dataclass
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray


def _as_nchw(images) -> np.ndarray:
    """uint8 HxW / HxWxC arrays, or already-normalized NxCxHxW floats."""
    if isinstance(images, Tensor):
        return images.data
    if isinstance(images, np.ndarray) and images.ndim == 4 and images.dtype != np.uint8:
        return images.astype(DTYPE)
    out = []
    for img in images:
        a = np.asarray(img)
        if a.ndim == 2:
            a = a[:, :, None]
        out.append(normalize(a).transpose(2, 0, 1))
    return np.stack(out).astype(DTYPE)


def embed(images, extractor: Optional[PerceptualExtractor] = None, source: str = "real",
          chunk: int = 8) -> EmbeddingSet:
    """Global-average-pooled final extractor stage, one row per image."""
    ex = extractor or PerceptualExtractor()
    if len(images) == 0:
        raise ValueError("cannot embed an empty image list")
    x = _as_nchw(images)
    rows = []
    for i in range(0, x.shape[0], chunk):
        feat = ex(Tensor(x[i:i + chunk]))[-1].data
        rows.append(feat.mean(axis=(2, 3)))
    return EmbeddingSet(np.concatenate(rows), source, ex.fingerprint())


def gaussian_stats(e: EmbeddingSet) -> GaussianStats:
    if e.n < 2:
        raise ValueError(f"need at least 2 embeddings, got {e.n}")
    x = e.matrix.astype(np.float64)
    mu = x.mean(axis=0)
    c = x - mu
    sigma = c.T @ c / (e.n - 1)
    return GaussianStats(mu, (sigma + sigma.T) / 2.0)


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2.0)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def trace_sqrt_product(a: np.ndarray, b: np.ndarray) -> float:
    """Tr((A B)^{1/2}) for PSD A, B, via the symmetric similar matrix A^{1/2} B A^{1/2}."""
    ra = _psd_sqrt(a)
    w = np.linalg.eigvalsh(_sym(ra @ b @ ra))
    return float(np.sqrt(np.clip(w, 0.0, None)).sum())


def _sym(m):
    return (m + m.T) / 2.0


def fid(a: GaussianStats, b: GaussianStats) -> float:
    if a.mu.shape != b.mu.shape or a.sigma.shape != b.sigma.shape:
        raise ValueError(f"dimension mismatch: {a.mu.shape} vs {b.mu.shape}")
    diff = np.asarray(a.mu, np.float64) - np.asarray(b.mu, np.float64)
    sa, sb = np.asarray(a.sigma, np.float64), np.asarray(b.sigma, np.float64)
    scale = float(diff @ diff + np.trace(sa) + np.trace(sb))
    value = scale - 2.0 * trace_sqrt_product(sa, sb)
    # anything under the eigensolver's round-off floor is reported as an exact zero
    return 0.0 if value <= 1e-10 * scale else value


def _poly_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return (x @ y.T / x.shape[1] + 1.0) ** 3


def _mmd2(x: np.ndarray, y: np.ndarray) -> float:
    n, m = x.shape[0], y.shape[0]
    kxx, kyy, kxy = _poly_kernel(x, x), _poly_kernel(y, y), _poly_kernel(x, y)
    # exactly rounded sums keep kid(a, b) == kid(b, a) bit for bit
    off = lambda k: math.fsum(k[~np.eye(k.shape[0], dtype=bool)])
    sxx = off(kxx) / (n * (n - 1))
    syy = off(kyy) / (m * (m - 1))
    return float(sxx + syy - 2.0 * math.fsum(kxy.ravel()) / (n * m))


def kid(a: EmbeddingSet, b: EmbeddingSet, subsets: int = 0, subset_size: int = 0, seed: int = 0) -> float:
    """Unbiased MMD^2 with the cubic polynomial kernel.

    With ``subsets > 0`` the estimate is averaged over that many random subsets
    of ``subset_size`` rows drawn from each set.
    """
    if a.n < 2 or b.n < 2:
        raise ValueError(f"KID needs at least 2 rows per set, got {a.n} and {b.n}")
    if a.d != b.d:
        raise ValueError(f"dimension mismatch: {a.d} vs {b.d}")
    x, y = a.matrix.astype(np.float64), b.matrix.astype(np.float64)
    if subsets <= 0:
        return _mmd2(x, y)
    size = subset_size or min(a.n, b.n)
    if size < 2 or size > min(a.n, b.n):
        raise ValueError(f"subset size {size} incompatible with set sizes {a.n}, {b.n}")
    rng = np.random.default_rng(seed)
    vals = [_mmd2(x[rng.choice(a.n, size, replace=False)], y[rng.choice(b.n, size, replace=False)])
            for _ in range(subsets)]
    return float(np.mean(vals))


# ---------------------------------------------------------------- protocol

@dataclass
class ScoreTable:
    model: str
    columns: list[str]
    fid: dict[str, float] = field(default_factory=dict)
    kid: dict[str, float] = field(default_factory=dict)
    note: str = EMBEDDER_NOTE

    def rows(self) -> list[list[str]]:
        head = ["metric", "model"] + [COLUMN_LABELS.get(c, c) for c in self.columns]
        body = [["FID", self.model] + [f"{self.fid[c]:.6g}" for c in self.columns],
                ["KID", self.model] + [f"{self.kid[c]:.6g}" for c in self.columns]]
        return [head] + body

    def to_dsv(self, sep: str = "\t") -> str:
        return "".join(sep.join(r) + "\n" for r in self.rows()) + f"# {self.note}\n"

    def to_text(self) -> str:
        rows = self.rows()
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines) + f"\n({self.note})\n"

    def finite(self) -> bool:
        return all(np.isfinite(v) for v in list(self.fid.values()) + list(self.kid.values()))


def predict_with(pair: GeneratorPair, chunk: int = 4) -> Callable[[Sequence[np.ndarray]], list[np.ndarray]]:
    """Wrap a generator pair as uint8 fundus list -> uint8 angiogram list."""
    pair.eval()

    def predict(fundus: Sequence[np.ndarray]) -> list[np.ndarray]:
        out = []
        for i in range(0, len(fundus), chunk):
            fine, _ = generate(pair, fundus_batch(fundus[i:i + chunk]))
            out.extend(denormalize(fine.data[j].transpose(1, 2, 0)) for j in range(fine.shape[0]))
        return out

    return predict


def evaluate_protocol(generator, test_pairs: Sequence[ImagePair],
                      distortions: Optional[Sequence[DistortionSpec]] = None,
                      extractor: Optional[PerceptualExtractor] = None, model: str = "model",
                      kid_subsets: int = 0) -> ScoreTable:
    """Scores generated vs real angiograms for clean inputs and each distortion.

    ``generator`` may be a GeneratorPair, a checkpoint path, or any callable
    mapping a list of uint8 fundus images to uint8 angiograms.
    """
    if isinstance(generator, (str, Path)):
        from .trainer import load_generators
        generator, _ = load_generators(generator)
    predict = predict_with(generator) if isinstance(generator, GeneratorPair) else generator
    if len(test_pairs) < 2:
        raise ValueError(f"evaluation needs at least 2 test pairs, got {len(test_pairs)}")
    specs = list(distortions) if distortions is not None else default_distortions()
    ex = extractor or PerceptualExtractor()
    real = embed([p.angio for p in test_pairs], ex, "real")
    real_stats = gaussian_stats(real)
    columns = ["orig"] + [s.kind for s in specs]
    if len(set(columns)) != len(columns):
        raise ValueError(f"distortion kinds must be distinct, got {columns[1:]}")
    table = ScoreTable(model, columns)
    inputs = {"orig": [p.fundus for p in test_pairs]}
    for s in specs:
        inputs[s.kind] = [distort(p.fundus, s) for p in test_pairs]
    for col in columns:
        gen = embed(predict(inputs[col]), ex, "generated")
        table.fid[col] = fid(real_stats, gaussian_stats(gen))
        table.kid[col] = kid(real, gen, subsets=kid_subsets)
    return table


__all__ = ["EmbeddingSet", "GaussianStats", "embed", "gaussian_stats", "fid", "kid", "trace_sqrt_product",
           "ScoreTable", "evaluate_protocol", "predict_with", "DISTORTION_KINDS", "EMBEDDER_NOTE"]
