"""MVTec-style dataset indexing and the built-in procedural toy dataset.

Layout::

    <root>/<category>/train/good/*.png
    <root>/<category>/test/<defect-type>/*.png      (defect-type "good" = normal)
    <root>/<category>/ground_truth/<defect-type>/<stem>_mask.png
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import imageio, synth
from .numerics import Rng

GOOD = "good"
TOY_KINDS = ("stripes", "checker")


@dataclass
class DatasetIndex:
    category: str
    train: list[Path]
    test: list[Path]
    labels: list[int]
    masks: list[Path | None]
    defect_types: list[str]

    def load_train(self, size: int, channels: int = 3) -> list[np.ndarray]:
        return [imageio.read_image(p, size, channels) for p in self.train]

    def load_test(self, size: int, channels: int = 3) -> tuple[list[np.ndarray], list[np.ndarray]]:
        images, masks = [], []
        for path, mask_path in zip(self.test, self.masks):
            image = imageio.read_image(path, size, channels)
            if mask_path is None:
                mask = np.zeros(image.shape[:2], dtype=bool)
            else:
                mask = imageio.read_mask(mask_path, size)
            images.append(image)
            masks.append(mask)
        return images, masks


def _pngs(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.suffix.lower() == ".png") if directory.is_dir() else []


def ingest(root: str | Path, category: str) -> DatasetIndex:
    base = Path(root) / category
    if not base.is_dir():
        raise FileNotFoundError(f"category directory {base} does not exist")
    train = _pngs(base / "train" / GOOD)
    test, labels, masks, defects = [], [], [], []
    test_root = base / "test"
    defect_dirs = [d for d in test_root.iterdir() if d.is_dir()] if test_root.is_dir() else []
    # normals first, then defect types alphabetically
    for defect_dir in sorted(defect_dirs, key=lambda d: (d.name != GOOD, d.name)):
        for path in _pngs(defect_dir):
            test.append(path)
            defects.append(defect_dir.name)
            if defect_dir.name == GOOD:
                labels.append(0)
                masks.append(None)
                continue
            mask = base / "ground_truth" / defect_dir.name / f"{path.stem}_mask.png"
            if not mask.is_file():
                raise FileNotFoundError(f"missing ground-truth mask {mask} for anomalous image {path}")
            labels.append(1)
            masks.append(mask)
    return DatasetIndex(category, train, test, labels, masks, defects)


def toy_texture(kind: str, size: int, rng: Rng) -> np.ndarray:
    """A procedurally generated normal texture in [-1, 1], ``size x size x 3``."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if kind == "stripes":
        phase = rng.uniform(0.0, 2.0 * np.pi)
        pattern = np.tanh(3.0 * np.sin(2.0 * np.pi * (xx + yy) / 11.0 + phase))
        low, high = np.array([-0.7, -0.2, 0.3]), np.array([0.6, 0.5, -0.4])
    elif kind == "checker":
        ox, oy = rng.integers(0, 16), rng.integers(0, 16)
        pattern = np.where(((xx + ox) // 8 + (yy + oy) // 8) % 2 == 0, 1.0, -1.0)
        low, high = np.array([-0.6, -0.6, -0.1]), np.array([0.5, 0.4, 0.7])
    else:
        raise ValueError(f"unknown toy texture {kind!r}; expected one of {TOY_KINDS}")
    t = (pattern[:, :, None] + 1.0) / 2.0
    image = low + (high - low) * t + 0.03 * rng.generator.standard_normal((size, size, 3))
    return np.clip(image, -1.0, 1.0).astype(np.float32)


def make_toy_dataset(
    root: str | Path,
    category: str = "stripes",
    n_train: int = 200,
    n_test: int = 100,
    anomaly_fraction: float = 0.5,
    size: int = 64,
    seed: int = 0,
    synth_config: synth.SynthConfig = synth.SynthConfig(),
) -> Path:
    """Write a toy category in the MVTec layout; defects come from the synthesizer."""
    kind = category if category in TOY_KINDS else TOY_KINDS[0]
    base = Path(root) / category
    dirs = {
        "train": base / "train" / GOOD,
        "good": base / "test" / GOOD,
        "defect": base / "test" / "synthetic",
        "gt": base / "ground_truth" / "synthetic",
    }
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)
    rng = Rng(seed, f"toy/{category}")
    for i in range(n_train):
        imageio.write_image(dirs["train"] / f"{i:04d}.png", toy_texture(kind, size, rng))
    n_anomalous = int(round(n_test * anomaly_fraction))
    for i in range(n_test - n_anomalous):
        imageio.write_image(dirs["good"] / f"{i:04d}.png", toy_texture(kind, size, rng))
    for i in range(n_anomalous):
        normal = toy_texture(kind, size, rng)
        sample = synth.make_synthetic(normal, rng.child(f"defect-{i}"), None, synth_config)
        imageio.write_image(dirs["defect"] / f"{i:04d}.png", sample.image)
        imageio.write_mask(dirs["gt"] / f"{i:04d}_mask.png", sample.mask)
    return base
