"""Paired fundus/angiogram data: synthesis, manifests, crops, normalization, distortions."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .tensor import DTYPE, Tensor

DISTORTION_KINDS = ("noise", "blur", "sharpen", "whirl", "pinch")


@dataclass
class ImagePair:
    """``fundus`` is H x W x 3 uint8, ``angio`` is H x W x 1 uint8."""

    fundus: np.ndarray
    angio: np.ndarray
    pair_id: str = ""
    aligned: bool = True
    crop: Optional[tuple[int, int, int]] = None  # (top, left, size)

    def __post_init__(self):
        if self.angio.ndim == 2:
            self.angio = self.angio[:, :, None]
        if self.fundus.ndim != 3 or self.fundus.shape[2] != 3:
            raise ValueError(f"fundus must be H x W x 3, got {self.fundus.shape}")
        if self.angio.shape[2] != 1:
            raise ValueError(f"angiogram must be single-channel, got {self.angio.shape}")
        if self.fundus.shape[:2] != self.angio.shape[:2]:
            raise ValueError(f"fundus {self.fundus.shape[:2]} and angiogram {self.angio.shape[:2]} differ in size")

    @property
    def size(self) -> tuple[int, int]:
        return self.fundus.shape[0], self.fundus.shape[1]


# ---------------------------------------------------------------- normalization

def normalize(img: np.ndarray) -> np.ndarray:
    """[0, 255] -> [-1, 1]."""
    return (np.asarray(img, dtype=np.float64) / 127.5 - 1.0).astype(DTYPE)


def denormalize(x: np.ndarray) -> np.ndarray:
    """[-1, 1] -> uint8, clamping out-of-range values."""
    v = (np.asarray(x, dtype=np.float64) + 1.0) * 127.5
    return np.clip(np.rint(v), 0, 255).astype(np.uint8)


def to_batch(pairs: Sequence[ImagePair]) -> tuple[Tensor, Tensor]:
    """Stack pairs into normalized NCHW tensors ``(fundus N x 3, angio N x 1)``."""
    if not pairs:
        raise ValueError("empty batch")
    fundus = np.stack([normalize(p.fundus).transpose(2, 0, 1) for p in pairs])
    angio = np.stack([normalize(p.angio).transpose(2, 0, 1) for p in pairs])
    return Tensor(fundus), Tensor(angio)


def fundus_batch(images: Sequence[np.ndarray]) -> Tensor:
    return Tensor(np.stack([normalize(im).transpose(2, 0, 1) for im in images]))


# ---------------------------------------------------------------- crops

def _crop(pair: ImagePair, top: int, left: int, size: int, tag: str) -> ImagePair:
    sl = (slice(top, top + size), slice(left, left + size))
    return ImagePair(pair.fundus[sl].copy(), pair.angio[sl].copy(), f"{pair.pair_id}{tag}",
                     pair.aligned, (top, left, size))


def crop_offsets(h: int, w: int, crop: int, count: int, seed) -> list[tuple[int, int]]:
    if crop > min(h, w) or crop < 1:
        raise ValueError(f"crop {crop} does not fit a {h}x{w} image")
    rng = np.random.default_rng(seed)
    tops = rng.integers(0, h - crop + 1, size=count)
    lefts = rng.integers(0, w - crop + 1, size=count)
    return [(int(t), int(l)) for t, l in zip(tops, lefts)]


def extract_training_crops(pair: ImagePair, crop: int, count: int, seed=0) -> list[ImagePair]:
    """``count`` crops at seeded uniform-random positions, same window for both modalities."""
    h, w = pair.size
    return [_crop(pair, t, l, crop, f"_c{i}") for i, (t, l) in enumerate(crop_offsets(h, w, crop, count, seed))]


def quadrant_offsets(h: int, w: int, crop: int) -> list[tuple[int, int]]:
    if crop > min(h, w) or crop < 1:
        raise ValueError(f"crop {crop} does not fit a {h}x{w} image")
    if 2 * crop < max(h, w):
        raise ValueError(f"quadrants of size {crop} do not overlap on a {h}x{w} image")
    return [(0, 0), (0, w - crop), (h - crop, 0), (h - crop, w - crop)]


def extract_test_quadrants(pair: ImagePair, crop: int) -> list[ImagePair]:
    """Corner-anchored crops: top-left, top-right, bottom-left, bottom-right."""
    h, w = pair.size
    return [_crop(pair, t, l, crop, f"_q{i}") for i, (t, l) in enumerate(quadrant_offsets(h, w, crop))]


# ---------------------------------------------------------------- synthetic pairs

FUNDUS_VESSEL_RGB = np.array([118.0, 28.0, 18.0])
ANGIO_VESSEL = 228.0


def _grow_tree(rng: np.random.Generator, origin, size: int) -> list[tuple[np.ndarray, np.ndarray, float]]:
    """Segments (start, end, width) from seeded recursive branching."""
    segments = []
    root_width = max(1.6, size / 28.0)

    def branch(start, angle, length, width, depth):
        pos = np.array(start, dtype=np.float64)
        n_sub = 3
        for _ in range(n_sub):
            angle += rng.normal(0.0, 0.25)
            step = length / n_sub
            nxt = pos + step * np.array([np.sin(angle), np.cos(angle)])
            segments.append((pos.copy(), nxt, width))
            pos = nxt
        if depth == 0 or width < 0.9:
            return
        for sign in (-1.0, 1.0):
            spread = rng.uniform(0.35, 0.8)
            branch(pos, angle + sign * spread, length * rng.uniform(0.6, 0.8), width * 0.72, depth - 1)

    n_roots = int(rng.integers(4, 7))
    base_angles = np.sort(rng.uniform(0.0, 2 * np.pi, size=n_roots))
    for a in base_angles:
        branch(origin, a, size * rng.uniform(0.16, 0.24), root_width, depth=3)
    return segments


def _rasterize(segments, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    mask = np.zeros((size, size), dtype=bool)
    for p0, p1, width in segments:
        d = p1 - p0
        denom = float(d @ d) or 1e-12
        t = np.clip(((yy - p0[0]) * d[0] + (xx - p0[1]) * d[1]) / denom, 0.0, 1.0)
        dist2 = (yy - p0[0] - t * d[0]) ** 2 + (xx - p0[1] - t * d[1]) ** 2
        mask |= dist2 <= (width / 2.0) ** 2
    return mask


def synth_pair(seed, size: int = 64) -> ImagePair:
    """Procedural aligned pair sharing one vessel tree.

    Fundus: orange field of view, bright optic disc, dark vessels.
    Angiogram: dark background, moderately bright disc, bright vessels.
    """
    if size < 32:
        raise ValueError(f"synthetic pairs need size >= 32, got {size}")
    rng = np.random.default_rng(seed)
    c = size / 2.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    r_fov = 0.48 * size
    rr = np.hypot(yy - c + 0.5, xx - c + 0.5) / r_fov
    fov = rr <= 1.0
    disc = np.array([c + rng.uniform(-0.12, 0.12) * size, c + rng.choice([-1, 1]) * rng.uniform(0.12, 0.22) * size])
    disc_r = rng.uniform(0.07, 0.1) * size
    vessels = _rasterize(_grow_tree(rng, disc, size), size) & fov

    texture = ndimage.gaussian_filter(rng.normal(0.0, 1.0, (size, size)), sigma=size / 16.0)
    texture /= np.abs(texture).max() + 1e-12
    shade = np.clip(1.0 - 0.22 * rr ** 2 + 0.05 * texture, 0.0, 1.0)
    ddisc = np.hypot(yy - disc[0], xx - disc[1]) / disc_r
    disc_w = np.clip(1.5 - ddisc, 0.0, 1.0)

    fundus = np.array([208.0, 98.0, 42.0])[None, None, :] * shade[:, :, None]
    fundus = fundus * (1 - disc_w[:, :, None]) + np.array([250.0, 214.0, 140.0]) * disc_w[:, :, None]
    fundus[vessels] = FUNDUS_VESSEL_RGB
    fundus[~fov] = 0.0

    angio = 38.0 * shade + 14.0 * texture
    angio = angio * (1 - disc_w) + 140.0 * disc_w
    angio[vessels] = ANGIO_VESSEL
    angio[~fov] = 0.0

    f8 = np.clip(np.rint(fundus), 0, 255).astype(np.uint8)
    a8 = np.clip(np.rint(angio), 0, 255).astype(np.uint8)
    return ImagePair(f8, a8[:, :, None], pair_id=f"synth_{seed}")


def fundus_vessel_mask(fundus: np.ndarray) -> np.ndarray:
    f = fundus.astype(np.int32)
    return (np.abs(f[..., 0] - int(FUNDUS_VESSEL_RGB[0])) <= 12) & (f[..., 1] < 60) & (f[..., 0] > 60)


def angio_vessel_mask(angio: np.ndarray) -> np.ndarray:
    a = angio[..., 0] if angio.ndim == 3 else angio
    return a >= 190


# ---------------------------------------------------------------- distortions

@dataclass(frozen=True)
class DistortionSpec:
    kind: str
    strength: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DISTORTION_KINDS:
            raise ValueError(f"unknown distortion kind {self.kind!r}; expected one of {DISTORTION_KINDS}")
        if self.strength < 0:
            raise ValueError(f"distortion strength must be >= 0, got {self.strength}")


# Strengths used by the evaluation protocol when none are given.
DEFAULT_STRENGTHS = {"noise": 0.05, "blur": 1.0, "sharpen": 1.0, "whirl": 1.5, "pinch": 0.5}


def default_distortions(seed: int = 0) -> list[DistortionSpec]:
    return [DistortionSpec(k, DEFAULT_STRENGTHS[k], seed) for k in DISTORTION_KINDS]


def _spatial_sigma(img: np.ndarray, sigma: float):
    return (sigma, sigma) + (0,) * (img.ndim - 2)


def _warp(img: np.ndarray, src_y: np.ndarray, src_x: np.ndarray) -> np.ndarray:
    if img.ndim == 2:
        return ndimage.map_coordinates(img, [src_y, src_x], order=1, mode="nearest")
    return np.stack([ndimage.map_coordinates(img[..., ch], [src_y, src_x], order=1, mode="nearest")
                     for ch in range(img.shape[2])], axis=-1)


def _polar_grid(h: int, w: int):
    cy, cx = h // 2, w // 2
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    return cy, cx, dy, dx, np.hypot(dy, dx), min(h, w) / 2.0


def distort(img: np.ndarray, spec: DistortionSpec) -> np.ndarray:
    """Apply one distortion; output has the input's shape and dtype, clamped to [0, 255].

    blur: Gaussian, sigma = strength.  sharpen: unsharp mask (sigma 1), amount = strength.
    noise: additive Gaussian, sigma = strength * 255.  whirl: rotation by
    strength * (1 - r/R) about the centre.  pinch: radius r samples r * (r/R)**strength.
    """
    if not isinstance(spec, DistortionSpec):
        raise TypeError("spec must be a DistortionSpec")
    src = np.asarray(img)
    x = src.astype(np.float64)
    s = float(spec.strength)
    if spec.kind == "blur":
        out = x if s == 0 else ndimage.gaussian_filter(x, _spatial_sigma(x, s), mode="reflect")
    elif spec.kind == "sharpen":
        out = x if s == 0 else x + s * (x - ndimage.gaussian_filter(x, _spatial_sigma(x, 1.0), mode="reflect"))
    elif spec.kind == "noise":
        out = x if s == 0 else x + np.random.default_rng(spec.seed).normal(0.0, s * 255.0, x.shape)
    else:
        cy, cx, dy, dx, r, big_r = _polar_grid(x.shape[0], x.shape[1])
        inside = r < big_r
        if spec.kind == "whirl":
            theta = np.where(inside, s * (1.0 - r / big_r), 0.0)
            cos, sin = np.cos(theta), np.sin(theta)
            sy, sx = cy + cos * dy - sin * dx, cx + sin * dy + cos * dx
        else:
            scale = np.where(inside, (r / big_r) ** s, 1.0)
            sy, sx = cy + dy * scale, cx + dx * scale
        out = _warp(x, sy, sx)
    out = np.clip(out, 0.0, 255.0)
    if np.issubdtype(src.dtype, np.integer):
        return np.rint(out).astype(src.dtype)
    return out.astype(src.dtype if np.issubdtype(src.dtype, np.floating) else np.float64)


# ---------------------------------------------------------------- files and manifests

@dataclass
class ManifestRecord:
    fundus: Path
    angio: Path
    split: str = "train"


@dataclass
class DatasetManifest:
    records: list[ManifestRecord] = field(default_factory=list)
    crop_size: Optional[int] = None
    crop_count: int = 1
    crop_seed: int = 0

    def split(self, tag: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == tag]


def save_image(path, arr: np.ndarray) -> None:
    path = Path(path)
    a = np.asarray(arr)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[:, :, 0]
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(a.astype(np.uint8)).save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"cannot write image {path}: {exc}") from exc


def load_image(path, mode: str) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as im:
            arr = np.array(im.convert(mode))
    except OSError as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    return arr[:, :, None] if mode == "L" else arr


def write_manifest(path, manifest: DatasetManifest) -> None:
    path = Path(path)
    lines = ["# fundus\tangio\tsplit"]
    if manifest.crop_size:
        lines.append(f"#crop size={manifest.crop_size} count={manifest.crop_count} seed={manifest.crop_seed}")
    base = path.parent.resolve()

    def rel(p) -> str:
        # stored relative to the manifest's directory so the dataset can move as a unit
        return Path(os.path.relpath(Path(p).resolve(), base)).as_posix()

    for rec in manifest.records:
        lines.append(f"{rel(rec.fundus)}\t{rel(rec.angio)}\t{rec.split}")
    try:
        path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write manifest {path}: {exc}") from exc


def read_manifest(path) -> DatasetManifest:
    """Tab-separated ``fundus angio split`` lines; paths relative to the manifest's directory."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise OSError(f"cannot read manifest {path}: {exc}") from exc
    man = DatasetManifest()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#crop"):
            opts = dict(tok.split("=", 1) for tok in line[len("#crop"):].split())
            man.crop_size = int(opts["size"])
            man.crop_count = int(opts.get("count", 1))
            man.crop_seed = int(opts.get("seed", 0))
            continue
        if line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) not in (2, 3):
            raise ValueError(f"{path}:{lineno}: expected 'fundus<TAB>angio[<TAB>split]'")
        split = parts[2] if len(parts) == 3 else "train"
        if split not in ("train", "test"):
            raise ValueError(f"{path}:{lineno}: split must be train or test, got {split!r}")
        f, a = (Path(p) if Path(p).is_absolute() else path.parent / p for p in parts[:2])
        for p in (f, a):
            if not p.is_file():
                raise FileNotFoundError(f"{path}:{lineno}: missing file {p}")
        man.records.append(ManifestRecord(f, a, split))
    return man


def load_pairs(manifest: DatasetManifest, split: str) -> list[ImagePair]:
    return [ImagePair(load_image(r.fundus, "RGB"), load_image(r.angio, "L"), pair_id=Path(r.fundus).stem)
            for r in manifest.split(split)]


def training_set(manifest: DatasetManifest) -> list[ImagePair]:
    """Train pairs, expanded into crops when the manifest carries a crop policy."""
    pairs = load_pairs(manifest, "train")
    if not manifest.crop_size:
        return pairs
    out = []
    for i, p in enumerate(pairs):
        out.extend(extract_training_crops(p, manifest.crop_size, manifest.crop_count, [manifest.crop_seed, i]))
    return out


def evaluation_set(manifest: DatasetManifest, crop: Optional[int] = None) -> list[ImagePair]:
    pairs = load_pairs(manifest, "test")
    if crop is None:
        return pairs
    return [q for p in pairs for q in extract_test_quadrants(p, crop)]
