"""Synthetic anomalies: Perlin-shaped masks, foreground gating, appearance blending.

Images here are ``H x W x C`` float32 numpy arrays in [-1, 1]; masks are
``H x W`` boolean arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import imageio
from .numerics import Rng

OBJECT = "object"
TEXTURE = "texture"
AUGMENT_MODES = ("rotate", "permute", "shuffle")


@dataclass(frozen=True)
class PerlinField:
    width: int
    height: int
    resolution: tuple[int, int]
    values: np.ndarray


@dataclass(frozen=True)
class SynthSample:
    image: np.ndarray
    mask: np.ndarray
    label: int


def _fade(t: np.ndarray) -> np.ndarray:
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def perlin2d(rng: Rng, width: int, height: int, rx: int, ry: int) -> PerlinField:
    """Classic 2-D gradient noise with ``rx x ry`` lattice cells.

    Unit gradients keep the field inside [-sqrt(2)/2, sqrt(2)/2]; pixels that
    sit on a lattice corner evaluate to exactly 0.
    """
    if rx < 1 or ry < 1 or width % rx or height % ry:
        raise ValueError(f"lattice resolution ({rx}, {ry}) must divide image size ({width}, {height})")
    angles = rng.generator.uniform(0.0, 2.0 * np.pi, size=(ry + 1, rx + 1))
    gx, gy = np.cos(angles), np.sin(angles)

    px, py = width // rx, height // ry
    # Lattice coordinates of every pixel: integer cell + fractional offset.
    ux = np.arange(width) / px
    uy = np.arange(height) / py
    cx, cy = np.floor(ux).astype(int), np.floor(uy).astype(int)
    fx, fy = ux - cx, uy - cy
    CX, CY = np.meshgrid(cx, cy)
    FX, FY = np.meshgrid(fx, fy)

    def corner(dx: int, dy: int) -> np.ndarray:
        return gx[CY + dy, CX + dx] * (FX - dx) + gy[CY + dy, CX + dx] * (FY - dy)

    sx, sy = _fade(FX), _fade(FY)
    top = corner(0, 0) + sx * (corner(1, 0) - corner(0, 0))
    bottom = corner(0, 1) + sx * (corner(1, 1) - corner(0, 1))
    values = top + sy * (bottom - top)
    return PerlinField(width=width, height=height, resolution=(rx, ry), values=values)


def otsu_threshold(gray: np.ndarray) -> float | None:
    """Exhaustive Otsu split over the distinct intensity levels.

    Returns the midpoint between the two levels that maximise between-class
    variance, or None for a constant image.
    """
    levels, counts = np.unique(gray.ravel(), return_counts=True)
    if len(levels) < 2:
        return None
    weights = counts / counts.sum()
    w0 = np.cumsum(weights)[:-1]
    mu_cum = np.cumsum(weights * levels)
    mu0 = mu_cum[:-1] / w0
    mu1 = (mu_cum[-1] - mu_cum[:-1]) / (1.0 - w0)
    between = w0 * (1.0 - w0) * (mu0 - mu1) ** 2
    k = int(np.argmax(between))
    return float(0.5 * (levels[k] + levels[k + 1]))


def _border(a: np.ndarray) -> np.ndarray:
    return np.concatenate([a[0, :], a[-1, :], a[1:-1, 0], a[1:-1, -1]])


def foreground_mask(image: np.ndarray, mode: str, rng: Rng) -> np.ndarray:
    """Region where anomalies may be placed.

    ``object``: global Otsu split of grayscale intensity, with whichever side
    dominates the image border taken as background. ``texture``: a random
    axis-aligned rectangle spanning 25-100% of each dimension.
    """
    if image.size == 0:
        raise ValueError("empty image")
    height, width = image.shape[:2]
    if mode == TEXTURE:
        h = rng.integers(math.ceil(0.25 * height), height + 1)
        w = rng.integers(math.ceil(0.25 * width), width + 1)
        top = rng.integers(0, height - h + 1)
        left = rng.integers(0, width - w + 1)
        mask = np.zeros((height, width), dtype=bool)
        mask[top : top + h, left : left + w] = True
        return mask
    if mode != OBJECT:
        raise ValueError(f"unknown foreground mode {mode!r}")

    gray = image.mean(axis=2) if image.ndim == 3 else image
    threshold = otsu_threshold(gray)
    if threshold is None:
        return np.zeros((height, width), dtype=bool)
    bright = gray > threshold
    border = _border(bright)
    return ~bright if border.mean() > 0.5 else bright


def make_anomaly_mask(field: PerlinField | np.ndarray, threshold: float, foreground: np.ndarray) -> np.ndarray:
    values = field.values if isinstance(field, PerlinField) else np.asarray(field)
    if values.shape != foreground.shape:
        raise ValueError(f"field {values.shape} and foreground {foreground.shape} differ in shape")
    return (values > threshold) & foreground.astype(bool)


def synthesize(N: np.ndarray, A: np.ndarray, M: np.ndarray, beta_opacity: float) -> SynthSample:
    """Blend appearance ``A`` into normal image ``N`` inside mask ``M``.

    Inside the mask a pixel becomes ``beta * N + (1 - beta) * A``; outside it
    is ``N`` untouched.
    """
    if N.shape != A.shape:
        raise ValueError(f"normal image {N.shape} and appearance {A.shape} differ in shape")
    if M.shape != N.shape[:2]:
        raise ValueError(f"mask {M.shape} does not match image {N.shape[:2]}")
    if not 0.0 <= beta_opacity <= 1.0:
        raise ValueError(f"opacity must lie in [0, 1], got {beta_opacity}")
    m = M.astype(N.dtype)[:, :, None]
    beta = N.dtype.type(beta_opacity)
    S = beta * (m * N) + (1 - beta) * (m * A) + (1 - m) * N
    mask = M.astype(bool)
    return SynthSample(image=S, mask=mask, label=int(mask.any()))


def rotate(image: np.ndarray, quarter_turns: int) -> np.ndarray:
    return np.ascontiguousarray(np.rot90(image, k=quarter_turns, axes=(0, 1)))


def permute_channels(image: np.ndarray, order: Sequence[int]) -> np.ndarray:
    return np.ascontiguousarray(image[:, :, list(order)])


def shuffle_blocks(image: np.ndarray, grid: int, order: Sequence[int]) -> np.ndarray:
    """Cut the image into ``grid x grid`` equal blocks and reassemble them in ``order``."""
    height, width = image.shape[:2]
    if height % grid or width % grid:
        raise ValueError(f"grid {grid} does not divide {height}x{width}")
    bh, bw = height // grid, width // grid
    blocks = [image[r * bh : (r + 1) * bh, c * bw : (c + 1) * bw] for r in range(grid) for c in range(grid)]
    out = np.empty_like(image)
    for slot, src in enumerate(order):
        r, c = divmod(slot, grid)
        out[r * bh : (r + 1) * bh, c * bw : (c + 1) * bw] = blocks[src]
    return out


def self_augment(N: np.ndarray, rng: Rng) -> np.ndarray:
    """One of rotation, channel permutation or block shuffle, chosen uniformly."""
    height, width, channels = N.shape
    mode = rng.choice(AUGMENT_MODES)
    if mode == "rotate":
        turns = rng.choice((1, 2, 3)) if height == width else 2
        return rotate(N, turns)
    if mode == "permute":
        return permute_channels(N, rng.permutation(channels))
    grids = [g for g in (2, 4) if height % g == 0 and width % g == 0]
    if not grids:
        return rotate(N, 2)
    grid = rng.choice(grids)
    return shuffle_blocks(N, grid, rng.permutation(grid * grid))


class TextureCorpus:
    """A directory tree of PNG textures used as foreign appearance."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        if not self.root.is_dir():
            raise OSError(f"texture corpus {self.root} is not a readable directory")
        self.paths = sorted(p for p in self.root.rglob("*") if p.suffix.lower() == ".png")
        if not self.paths:
            raise OSError(f"texture corpus {self.root} contains no PNG files")

    def __len__(self) -> int:
        return len(self.paths)

    def load(self, index: int, height: int, width: int, channels: int) -> np.ndarray:
        texture = imageio.read_image(self.paths[index], channels=1 if channels == 1 else 3)
        if texture.shape[:2] != (height, width):
            texture = imageio.resize(texture, height, width)
        if texture.shape[2] != channels:
            texture = np.repeat(texture[:, :, :1], channels, axis=2)
        return texture


def appearance_source(N: np.ndarray, corpus: TextureCorpus | None, rng: Rng) -> np.ndarray:
    if corpus is not None:
        height, width, channels = N.shape
        return corpus.load(rng.integers(0, len(corpus)), height, width, channels)
    return self_augment(N, rng)


@dataclass(frozen=True)
class SynthConfig:
    mode: str = TEXTURE
    threshold_range: tuple[float, float] = (0.3, 0.7)
    opacity_range: tuple[float, float] = (0.1, 0.8)
    coverage_range: tuple[float, float] = (0.001, 0.4)
    resolutions: tuple[int, ...] = (2, 4, 8)
    max_tries: int = 50


def draw_anomaly_mask(
    N: np.ndarray, rng: Rng, config: SynthConfig = SynthConfig()
) -> tuple[np.ndarray, np.ndarray]:
    """Rejection-sample a Perlin mask for ``N``; returns ``(mask, foreground)``.

    Masks covering less than ``coverage_range[0]`` or more than
    ``coverage_range[1]`` of the foreground are redrawn. An empty object
    foreground falls back to a texture-style rectangle.
    """
    height, width = N.shape[:2]
    resolutions = [r for r in config.resolutions if height % r == 0 and width % r == 0] or [1]
    low, high = config.coverage_range
    for _ in range(config.max_tries):
        foreground = foreground_mask(N, config.mode, rng)
        if not foreground.any():
            foreground = foreground_mask(N, TEXTURE, rng)
        res = rng.choice(resolutions)
        field = perlin2d(rng, width, height, res, res)
        threshold = rng.uniform(*config.threshold_range)
        mask = make_anomaly_mask(field, threshold, foreground)
        if low <= mask.sum() / foreground.sum() <= high:
            return mask, foreground
    raise RuntimeError(f"no acceptable anomaly mask after {config.max_tries} draws")


def make_synthetic(
    N: np.ndarray,
    rng: Rng,
    corpus: TextureCorpus | None = None,
    config: SynthConfig = SynthConfig(),
) -> SynthSample:
    """Draw one anomalous sample from normal image ``N``."""
    mask, _ = draw_anomaly_mask(N, rng, config)
    A = appearance_source(N, corpus, rng)
    beta = rng.uniform(*config.opacity_range)
    return synthesize(N, A, mask, beta)


def normal_sample(N: np.ndarray) -> SynthSample:
    return SynthSample(image=N, mask=np.zeros(N.shape[:2], dtype=bool), label=0)


def export_dataset(samples: Sequence[SynthSample], out_dir: str | Path) -> Path:
    """Write image/mask PNG pairs plus ``manifest.txt`` (image,mask,label per line)."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, sample in enumerate(samples):
        image_path = Path("images") / f"{i:05d}.png"
        mask_path = Path("masks") / f"{i:05d}_mask.png"
        imageio.write_image(out_dir / image_path, sample.image)
        imageio.write_mask(out_dir / mask_path, sample.mask)
        lines.append(f"{image_path.as_posix()},{mask_path.as_posix()},{sample.label}")
    manifest = out_dir / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def read_manifest(manifest: str | Path) -> list[tuple[Path, Path, int]]:
    manifest = Path(manifest)
    rows = []
    for line in manifest.read_text().splitlines():
        if line.strip():
            image, mask, label = line.split(",")
            rows.append((manifest.parent / image, manifest.parent / mask, int(label)))
    return rows
