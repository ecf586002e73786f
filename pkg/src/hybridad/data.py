"""Slice extraction, resizing, stratified splitting, augmentation and batching."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .autodiff import Tensor
from .errors import (
    DataError,
    EmptyInputError,
    LabelError,
    ParameterError,
    StratificationError,
)
from .nifti import Volume, load_volume

CLASS_NAMES = ("Mild Dementia", "Moderate Dementia", "Non Demented", "Very mild Dementia")
SPLIT_RATIOS = (0.70, 0.15, 0.15)
SPLIT_NAMES = ("train", "val", "test")
Z_LO, Z_HI = 100, 160


class LabelMap:
    """Alphabetical class-name <-> integer id encoder."""

    def __init__(self, names: Sequence[str] = CLASS_NAMES):
        ordered = sorted(set(names))
        if len(ordered) != len(names):
            raise LabelError(f"duplicate class names in {list(names)}")
        self.names: tuple[str, ...] = tuple(ordered)
        self._ids = {name: i for i, name in enumerate(self.names)}

    def __len__(self) -> int:
        return len(self.names)

    def encode(self, name: str) -> int:
        try:
            return self._ids[name]
        except KeyError:
            raise LabelError(f"unknown class {name!r}; expected one of {list(self.names)}") from None

    def decode(self, label: int) -> str:
        if not 0 <= label < len(self.names):
            raise LabelError(f"label {label} outside 0..{len(self.names) - 1}")
        return self.names[label]


@dataclass
class SliceSample:
    image: np.ndarray
    label: int
    source_volume: str = ""
    z_index: int = -1

    @property
    def sample_id(self) -> str:
        return f"{self.source_volume}:{self.z_index:03d}"


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list
    seed: int = 0
    ratios: tuple[float, float, float] = SPLIT_RATIOS

    def parts(self) -> dict[str, list]:
        return {"train": self.train, "val": self.val, "test": self.test}


# ---------------------------------------------------------------------------
# slices
# ---------------------------------------------------------------------------

def minmax_normalize(image: np.ndarray) -> np.ndarray:
    lo, hi = float(image.min()), float(image.max())
    if hi == lo:
        return np.zeros_like(image, dtype=np.float64)
    return np.clip((image - lo) / (hi - lo), 0.0, 1.0)


def extract_slices(volume: Volume, z_lo: int = Z_LO, z_hi: int = Z_HI, label: int = -1,
                   source: str | None = None) -> list[SliceSample]:
    """Axial slices ``z_lo..z_hi`` inclusive, each min-max scaled to [0, 1]."""
    vox = volume.voxels
    if vox.ndim < 3:
        raise DataError(f"expected a 3-D volume, got shape {vox.shape}")
    if not 0 <= z_lo <= z_hi:
        raise ParameterError(f"invalid slice range [{z_lo}, {z_hi}]")
    if vox.shape[2] <= z_hi:
        raise DataError(f"z extent {vox.shape[2]} does not reach slice index {z_hi}")
    source = volume.source if source is None else source
    return [SliceSample(minmax_normalize(vox[:, :, z].reshape(vox.shape[0], vox.shape[1])),
                        label, source, z)
            for z in range(z_lo, z_hi + 1)]


def _axis_coords(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel (align_corners=False) bilinear resize of a 2-D array."""
    if out_h < 1 or out_w < 1:
        raise ParameterError(f"target size must be positive, got {out_h}x{out_w}")
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or min(image.shape) < 1:
        raise ParameterError(f"expected a non-empty 2-D image, got shape {image.shape}")
    if image.shape == (out_h, out_w):
        return image.copy()
    r0, r1, fr = _axis_coords(image.shape[0], out_h)
    c0, c1, fc = _axis_coords(image.shape[1], out_w)
    top, bottom = image[r0], image[r1]
    rows = top + fr[:, None] * (bottom - top)
    left, right = rows[:, c0], rows[:, c1]
    out = left + fc[None, :] * (right - left)
    return np.clip(out, image.min(), image.max())


def sample_bilinear(image: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Bilinear lookup at fractional coordinates, replicating edge pixels."""
    h, w = image.shape
    ys = np.clip(ys, 0.0, h - 1)
    xs = np.clip(xs, 0.0, w - 1)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy, fx = ys - y0, xs - x0
    top = image[y0, x0] + fx * (image[y0, x1] - image[y0, x0])
    bottom = image[y1, x0] + fx * (image[y1, x1] - image[y1, x0])
    return top + fy * (bottom - top)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass
class AugmentConfig:
    rotation_deg: float = 15.0
    flip_prob: float = 0.5
    zoom: float = 0.1

    def validate(self) -> "AugmentConfig":
        if not 0.0 <= self.rotation_deg <= 180.0:
            raise ParameterError(f"rotation_deg must lie in [0, 180], got {self.rotation_deg}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ParameterError(f"flip_prob must lie in [0, 1], got {self.flip_prob}")
        if not 0.0 <= self.zoom <= 0.5:
            raise ParameterError(f"zoom range [1-z, 1+z] must stay within [0.5, 1.5], got z={self.zoom}")
        return self


def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, ::-1].copy()


def rotate(image: np.ndarray, degrees: float) -> np.ndarray:
    h, w = image.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = math.radians(degrees)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    src_y = cy + math.cos(theta) * dy - math.sin(theta) * dx
    src_x = cx + math.sin(theta) * dy + math.cos(theta) * dx
    return sample_bilinear(image, src_y, src_x)


def zoom(image: np.ndarray, factor: float) -> np.ndarray:
    """Central zoom; ``factor > 1`` magnifies."""
    h, w = image.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return sample_bilinear(image, cy + (yy - cy) / factor, cx + (xx - cx) / factor)


def augment(image: np.ndarray, rng: np.random.Generator,
            params: AugmentConfig | None = None) -> np.ndarray:
    """Random rotation, then horizontal flip, then central zoom; result clipped to [0, 1].

    Three draws are taken from ``rng`` per call regardless of which
    transforms end up as no-ops, so the stream position is predictable.
    """
    params = (params or AugmentConfig()).validate()
    angle = rng.uniform(-params.rotation_deg, params.rotation_deg)
    flip = rng.random() < params.flip_prob
    factor = rng.uniform(1.0 - params.zoom, 1.0 + params.zoom)
    out = np.asarray(image, dtype=np.float64)
    if angle != 0.0:
        out = rotate(out, angle)
    if flip:
        out = hflip(out)
    if factor != 1.0:
        out = zoom(out, factor)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------

# validation wins remainder ties, then test, then train
_TIE_PRIORITY = (2, 0, 1)


def allocate_counts(n: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``n`` items over ``ratios``."""
    exact = [n * Fraction(r).limit_denominator(10**6) for r in ratios]
    counts = [math.floor(e) for e in exact]
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - counts[i]), _TIE_PRIORITY[i]))
    for i in order[:n - sum(counts)]:
        counts[i] += 1
    return counts


def allocate_table(class_sizes: Sequence[int], ratios: Sequence[float]) -> np.ndarray:
    """Class x split counts: every cell is the floor or ceiling of its exact share, rows sum to
    the class sizes and columns to the largest-remainder split totals of the whole set.
    """
    k = len(ratios)
    fr = [Fraction(r).limit_denominator(10**6) for r in ratios]
    exact = [[n * f for f in fr] for n in class_sizes]
    table = [[math.floor(e) for e in row] for row in exact]
    col_need = [t - sum(row[s] for row in table)
                for s, t in enumerate(allocate_counts(sum(class_sizes), ratios))]
    bumped = [[False] * k for _ in class_sizes]

    def prefs(c):
        return sorted((s for s in range(k) if exact[c][s] != table[c][s]),
                      key=lambda s: (-(exact[c][s] - table[c][s]), _TIE_PRIORITY[s]))

    def place(c, seen):
        # augmenting path: give row c a column with spare room, evicting another row if needed
        for s in prefs(c):
            if bumped[c][s] or s in seen:
                continue
            seen.add(s)
            if col_need[s] > 0:
                col_need[s] -= 1
                bumped[c][s] = True
                return True
            for other in range(len(class_sizes)):
                if bumped[other][s]:
                    bumped[other][s] = False
                    if place(other, seen):
                        bumped[c][s] = True
                        return True
                    bumped[other][s] = True
        return False

    for c, n in enumerate(class_sizes):
        for _ in range(n - sum(table[c])):
            if not place(c, set()):
                raise StratificationError(f"cannot round split counts for class {c}")
    return np.array(table, dtype=np.int64) + np.array(bumped, dtype=np.int64)


def _check_ratios(ratios: Sequence[float]) -> None:
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ParameterError(f"ratios must be three positive values summing to 1, got {tuple(ratios)}")


def stratified_split_indices(labels: Sequence[int], ratios: Sequence[float] = SPLIT_RATIOS,
                             seed: int = 0, num_classes: int | None = None,
                             class_names: Sequence[str] | None = None
                             ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-class seeded shuffle, then a partition into train/val/test sized by ``allocate_table``.

    Returned index arrays are sorted ascending.
    """
    _check_ratios(ratios)
    labels = np.asarray(labels, dtype=np.int64)
    classes = range(num_classes) if num_classes is not None else np.unique(labels)
    rng = np.random.default_rng(seed)
    parts: list[list[np.ndarray]] = [[], [], []]
    groups = []
    for c in classes:
        members = np.flatnonzero(labels == c)
        if members.size < 3:
            name = class_names[c] if class_names is not None else f"class {c}"
            raise StratificationError(f"{name} has {members.size} samples; stratification needs >= 3")
        groups.append(members[rng.permutation(members.size)])
    table = allocate_table([g.size for g in groups], ratios)
    for members, counts in zip(groups, table):
        start = 0
        for part, count in zip(parts, counts):
            part.append(members[start:start + count])
            start += count
    return tuple(np.sort(np.concatenate(p)) if p else np.empty(0, np.int64) for p in parts)


def stratified_split(samples: Sequence, ratios: Sequence[float] = SPLIT_RATIOS, seed: int = 0,
                     num_classes: int | None = None,
                     class_names: Sequence[str] | None = None) -> DatasetSplit:
    labels = [s.label for s in samples]
    idx = stratified_split_indices(labels, ratios, seed, num_classes, class_names)
    train, val, test = ([samples[i] for i in part] for part in idx)
    return DatasetSplit(train, val, test, seed=seed, ratios=tuple(ratios))


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def stack_images(samples: Sequence, channels: int = 3) -> np.ndarray:
    images = np.stack([np.asarray(s.image, dtype=np.float64) for s in samples])[:, None]
    return np.repeat(images, channels, axis=1) if channels != 1 else images


def iter_batches(samples: Sequence, batch_size: int, shuffle_seed: int | None = None,
                 drop_last: bool = False, channels: int = 3,
                 augment_params: AugmentConfig | None = None,
                 augment_rng: np.random.Generator | None = None
                 ) -> Iterator[tuple[Tensor, np.ndarray]]:
    """Yield (images N,C,H,W, int labels N).  ``shuffle_seed=None`` keeps input order."""
    if batch_size < 1:
        raise ParameterError(f"batch_size must be >= 1, got {batch_size}")
    if len(samples) == 0:
        raise EmptyInputError("cannot batch an empty split")
    order = np.arange(len(samples))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(samples))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        if drop_last and idx.size < batch_size:
            break
        chunk = [samples[i] for i in idx]
        if augment_params is not None:
            rng = augment_rng or np.random.default_rng(0)
            chunk = [SliceSample(augment(s.image, rng, augment_params), s.label,
                                 s.source_volume, s.z_index) for s in chunk]
        yield Tensor(stack_images(chunk, channels)), np.array([s.label for s in chunk], dtype=np.int64)


def build_batches(samples: Sequence, batch_size: int, shuffle_seed: int | None = None,
                  drop_last: bool = False, channels: int = 3) -> list[tuple[Tensor, np.ndarray]]:
    return list(iter_batches(samples, batch_size, shuffle_seed, drop_last, channels))


# ---------------------------------------------------------------------------
# dataset trees and manifests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestRecord:
    sample_id: str
    source: str
    z_index: int
    label: int
    split: str


def scan_dataset(data_dir: str | Path, label_map: LabelMap | None = None) -> list[tuple[Path, int]]:
    """List ``(volume path, label)`` for class-named subdirectories of ``data_dir``."""
    label_map = label_map or LabelMap()
    root = Path(data_dir)
    if not root.is_dir():
        raise DataError(f"data directory {root} does not exist")
    found: list[tuple[Path, int]] = []
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        label = label_map.encode(sub.name)
        for path in sorted(sub.iterdir()):
            if path.name.endswith((".nii", ".nii.gz")):
                found.append((path, label))
    return found


def load_slices(data_dir: str | Path, image_size: tuple[int, int] | None = None,
                z_lo: int = Z_LO, z_hi: int = Z_HI,
                label_map: LabelMap | None = None) -> list[SliceSample]:
    """Extract (and optionally resize) every protocol slice under ``data_dir``."""
    root = Path(data_dir)
    samples: list[SliceSample] = []
    for path, label in scan_dataset(root, label_map):
        source = path.relative_to(root).as_posix()
        for s in extract_slices(load_volume(path), z_lo, z_hi, label, source):
            if image_size is not None:
                s.image = resize_bilinear(s.image, *image_size)
            samples.append(s)
    samples.sort(key=lambda s: (s.source_volume, s.z_index))
    return samples


def manifest_records(split: DatasetSplit) -> list[ManifestRecord]:
    records = [ManifestRecord(s.sample_id, s.source_volume, s.z_index, s.label, name)
               for name, part in split.parts().items() for s in part]
    return sorted(records, key=lambda r: (r.source, r.z_index))


def write_manifest(path: str | Path, records: Sequence[ManifestRecord]) -> Path:
    path = Path(path)
    lines = [f"{r.sample_id}\t{r.source}\t{r.z_index}\t{r.label}\t{r.split}\n"
             for r in sorted(records, key=lambda r: (r.source, r.z_index))]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(lines)
    return path


def read_manifest(path: str | Path) -> list[ManifestRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            fields = line.rstrip("\n").split("\t")
            if len(fields) != 5 or fields[4] not in SPLIT_NAMES:
                raise DataError(f"{path}:{lineno}: malformed manifest record {line!r}")
            try:
                records.append(ManifestRecord(fields[0], fields[1], int(fields[2]),
                                              int(fields[3]), fields[4]))
            except ValueError:
                raise DataError(f"{path}:{lineno}: malformed manifest record {line!r}") from None
    return records
