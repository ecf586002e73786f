"""Synthetic NIfTI fixtures with one separable texture per dementia class."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import CLASS_NAMES, Z_HI, Z_LO
from .nifti import write_volume

# intensity scaling stored in the header; raw values are int16
SLOPE, INTER = 0.5, 10.0


def class_pattern(label: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """In-plane texture for ``label`` with a random phase and small frequency jitter."""
    y, x = np.mgrid[0:size, 0:size] / size
    phase = rng.uniform(0, 2 * np.pi)
    jitter = rng.uniform(0.9, 1.1)
    if label == 0:
        return np.sin(2 * np.pi * 3 * jitter * y + phase)
    if label == 1:
        return np.sin(2 * np.pi * 6 * jitter * x + phase)
    if label == 2:
        r = np.hypot(x - 0.5, y - 0.5)
        return np.cos(2 * np.pi * 4 * jitter * r + phase)
    return np.sign(np.sin(2 * np.pi * 4 * jitter * x + phase) * np.sin(2 * np.pi * 4 * jitter * y))


def synth_volume(label: int, rng: np.random.Generator, size: int = 48, z_extent: int = 256,
                 noise: float = 0.35) -> np.ndarray:
    """int16 volume [size, size, z_extent]; protocol slices carry the class texture."""
    base = 200.0 + 60.0 * label
    vol = base + 40.0 * rng.standard_normal((size, size, z_extent))
    lo, hi = Z_LO, min(Z_HI, z_extent - 1)
    if lo <= hi:
        pattern = class_pattern(label, size, rng)
        depth = np.linspace(0.8, 1.2, hi - lo + 1)
        textured = pattern[:, :, None] * depth[None, None, :] + noise * rng.standard_normal(
            (size, size, hi - lo + 1))
        vol[:, :, lo:hi + 1] = base + 100.0 * textured
    raw = np.round((vol - INTER) / SLOPE)
    return np.clip(raw, -32768, 32767).astype(np.int16)


def synth_tree(out_dir: str | Path, volumes_per_class: int, z_extent: int = 256, seed: int = 0,
               size: int = 48) -> list[Path]:
    """Write ``volumes_per_class`` volumes into one directory per class name."""
    if volumes_per_class < 1:
        raise ValueError(f"volumes_per_class must be >= 1, got {volumes_per_class}")
    root = Path(out_dir)
    written = []
    for label, name in enumerate(CLASS_NAMES):
        class_dir = root / name
        class_dir.mkdir(parents=True, exist_ok=True)
        for i in range(volumes_per_class):
            rng = np.random.default_rng([seed, label, i])
            vol = synth_volume(label, rng, size=size, z_extent=z_extent)
            written.append(write_volume(class_dir / f"vol_{i:03d}.nii", vol, SLOPE, INTER))
    return written
