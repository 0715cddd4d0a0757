"""Separable Lanczos-3 resampling for NCHW image batches."""
from __future__ import annotations

from fractions import Fraction
from functools import lru_cache
from typing import Union

import numpy as np

from .tensor import DTYPE, Tensor

LOBES = 3


def lanczos_kernel(x: np.ndarray, a: int = LOBES) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.sinc(x) * np.sinc(x / a)
    return np.where(np.abs(x) < a, out, 0.0)


@lru_cache(maxsize=64)
def _weights(n_in: int, n_out: int, a: int = LOBES) -> np.ndarray:
    """(n_out, n_in) resampling matrix with pixel-centre alignment and clamped edges."""
    factor = n_out / n_in
    support = max(1.0, 1.0 / factor)
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        centre = (i + 0.5) / factor - 0.5
        lo = int(np.floor(centre - a * support))
        hi = int(np.ceil(centre + a * support))
        taps = np.arange(lo, hi + 1)
        w = lanczos_kernel((taps - centre) / support, a)
        np.add.at(mat[i], np.clip(taps, 0, n_in - 1), w)
        mat[i] /= mat[i].sum()
    return mat


def output_size(size: int, factor: Union[float, Fraction]) -> int:
    return int(round(size * float(factor)))


def lanczos_resize(image: Union[Tensor, np.ndarray], factor: Union[float, Fraction]) -> Tensor:
    """Resize the last two axes by ``factor``; result size is ``round(H * factor)``.

    Not differentiable: the result never carries a gradient.
    """
    data = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=DTYPE)
    if float(factor) <= 0:
        raise ValueError(f"resize factor must be positive, got {factor}")
    h, w = data.shape[-2:]
    ho, wo = output_size(h, factor), output_size(w, factor)
    if ho < 1 or wo < 1:
        raise ValueError(f"resize of {h}x{w} by {factor} is empty")
    return Tensor(resize_to(data, ho, wo))


def resize_to(data: np.ndarray, ho: int, wo: int) -> np.ndarray:
    h, w = data.shape[-2:]
    if (h, w) == (ho, wo):
        return np.array(data, dtype=DTYPE)
    wh = _weights(h, ho).astype(DTYPE)
    ww = _weights(w, wo).astype(DTYPE)
    out = np.matmul(np.matmul(wh, data.astype(DTYPE)), ww.T)
    return np.ascontiguousarray(out, dtype=DTYPE)
