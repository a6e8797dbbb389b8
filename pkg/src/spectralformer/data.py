"""Hyperspectral cubes: HSIF I/O, normalization, sample extraction, batching.

HSIF layout (little-endian)::

    b"HSIF"  u16 version=1  u32 m  u32 height  u32 width  u16 K
    f32 * m*height*width   radiance, band-sequential, rows row-major within a band
    u16 * height*width     labels (0 = unlabeled, 1..K)
    u8  * height*width     split tags (0 none, 1 train, 2 test)
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ContractError, DataError, ParseError

logger = logging.getLogger(__name__)

MAGIC = b"HSIF"
VERSION = 1
HEADER = struct.Struct("<4sHIIIH")

NONE, TRAIN, TEST = 0, 1, 2
SPLIT_TAGS = {"none": NONE, "train": TRAIN, "test": TEST}

# per-class (train, test) counts of the fixed public splits
PUBLISHED_SPLITS = {
    "indian_pines": [(50, 1384), (50, 784), (50, 184), (50, 447), (50, 697), (50, 439),
                     (50, 918), (50, 2418), (50, 564), (50, 162), (50, 1244), (50, 330),
                     (50, 45), (15, 39), (15, 11), (15, 5)],
    "pavia_university": [(548, 6304), (540, 18146), (392, 1815), (524, 2912), (265, 1113),
                         (532, 4572), (375, 981), (514, 3364), (231, 795)],
    "houston2013": [(198, 1053), (190, 1064), (192, 505), (188, 1056), (186, 1056),
                    (182, 143), (196, 1072), (191, 1053), (193, 1059), (191, 1036),
                    (181, 1054), (192, 1041), (184, 285), (181, 247), (187, 473)],
}
# (bands, height, width) of the same scenes
PUBLISHED_SHAPES = {
    "indian_pines": (200, 145, 145),
    "pavia_university": (103, 610, 340),
    "houston2013": (144, 349, 1905),
}


@dataclass(frozen=True)
class HsiCube:
    radiance: np.ndarray  # (m, height, width) float32
    labels: np.ndarray  # (height, width) int, 0 = unlabeled
    split: np.ndarray  # (height, width) uint8
    classes: int

    @property
    def m(self) -> int:
        return self.radiance.shape[0]

    @property
    def height(self) -> int:
        return self.radiance.shape[1]

    @property
    def width(self) -> int:
        return self.radiance.shape[2]

    def locations(self, split_tag: int | str) -> np.ndarray:
        """(row, col) pairs carrying ``split_tag`` in raster-scan order."""
        tag = SPLIT_TAGS[split_tag] if isinstance(split_tag, str) else split_tag
        return np.argwhere(self.split == tag)

    def labeled_locations(self) -> np.ndarray:
        return np.argwhere(self.labels > 0)

    def validate(self) -> None:
        if self.labels.shape != (self.height, self.width) or self.split.shape != self.labels.shape:
            raise DataError("label/split rasters do not match the cube's spatial size")
        if not np.all(np.isfinite(self.radiance)):
            raise DataError("radiance contains NaN or Inf")
        if self.labels.max(initial=0) > self.classes:
            raise DataError(f"label {int(self.labels.max())} exceeds class count {self.classes}")
        if np.any(~np.isin(self.split, (NONE, TRAIN, TEST))):
            raise DataError("split tags must be 0, 1 or 2")
        if np.any((self.split != NONE) & (self.labels == 0)):
            raise DataError("a train/test tagged pixel is unlabeled")


@dataclass(frozen=True)
class Sample:
    features: np.ndarray  # (m,) or (m, side, side)
    label: int
    location: tuple[int, int]


def save_cube(cube: HsiCube, path) -> None:
    cube.validate()
    header = HEADER.pack(MAGIC, VERSION, cube.m, cube.height, cube.width, cube.classes)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(cube.radiance, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(cube.labels, dtype="<u2").tobytes())
        fh.write(np.ascontiguousarray(cube.split, dtype="u1").tobytes())


def load_cube(path) -> HsiCube:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc.strerror}") from exc
    if len(buf) < HEADER.size:
        raise ParseError(f"{path}: header truncated at byte offset {len(buf)}: "
                         f"expected {HEADER.size} bytes, got {len(buf)}")
    magic, version, m, height, width, k = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise ParseError(f"{path}: bad magic {magic!r} at byte offset 0, expected {MAGIC!r}")
    if version != VERSION:
        raise ParseError(f"{path}: unsupported version {version} at byte offset 4")
    pixels = height * width
    expected = HEADER.size + 4 * m * pixels + 2 * pixels + pixels
    if len(buf) != expected:
        raise ParseError(f"{path}: payload size mismatch at byte offset {min(len(buf), expected)}: "
                         f"expected {expected} bytes in total, got {len(buf)}")
    off = HEADER.size
    radiance = np.frombuffer(buf, "<f4", m * pixels, off).reshape(m, height, width).astype(np.float32)
    off += 4 * m * pixels
    labels = np.frombuffer(buf, "<u2", pixels, off).reshape(height, width).astype(np.int64)
    off += 2 * pixels
    split = np.frombuffer(buf, "u1", pixels, off).reshape(height, width).copy()
    if labels.max(initial=0) > k:
        bad = int(np.argmax(labels.reshape(-1) > k))
        raise ParseError(f"{path}: label {int(labels.reshape(-1)[bad])} > K={k} "
                         f"at byte offset {HEADER.size + 4 * m * pixels + 2 * bad}")
    cube = HsiCube(radiance, labels, split, k)
    try:
        cube.validate()
    except DataError as exc:
        raise ParseError(f"{path}: {exc}") from None
    return cube


def split_counts(cube: HsiCube) -> list[tuple[int, int]]:
    """Per-class (train, test) pixel counts."""
    out = []
    for k in range(1, cube.classes + 1):
        mask = cube.labels == k
        out.append((int(np.sum(mask & (cube.split == TRAIN))), int(np.sum(mask & (cube.split == TEST)))))
    return out


def identify(cube: HsiCube) -> str | None:
    """Name of the public scene whose shape and split counts match, if any."""
    for name, shape in PUBLISHED_SHAPES.items():
        if (cube.m, cube.height, cube.width) == shape and len(PUBLISHED_SPLITS[name]) == cube.classes:
            if split_counts(cube) == PUBLISHED_SPLITS[name]:
                return name
    return None


def normalize(cube: HsiCube) -> HsiCube:
    """Per-band standardization with statistics over labeled pixels; constant bands become 0."""
    mask = cube.labels > 0
    if not mask.any():
        mask = np.ones_like(mask)
    rad = cube.radiance.astype(np.float64)
    vals = rad[:, mask]
    mean = vals.mean(axis=1)
    std = np.sqrt(((vals - mean[:, None]) ** 2).mean(axis=1))
    flat = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
    scale = np.where(flat, 1.0, std)
    out = (rad - mean[:, None, None]) / scale[:, None, None]
    out[flat] = 0.0
    return replace(cube, radiance=out.astype(np.float32))


def extract(cube: HsiCube, location, mode: str = "pixel", patch_side: int = 7) -> Sample:
    """Spectrum or replicate-padded ``(m, side, side)`` window centered at ``location``."""
    r, c = int(location[0]), int(location[1])
    if not (0 <= r < cube.height and 0 <= c < cube.width):
        raise ContractError(f"location {(r, c)} outside {cube.height}x{cube.width} image")
    label = int(cube.labels[r, c])
    if label < 1:
        raise ContractError(f"location {(r, c)} is unlabeled")
    return Sample(window(cube.radiance, r, c, mode, patch_side), label, (r, c))


def window(radiance: np.ndarray, r: int, c: int, mode: str, patch_side: int) -> np.ndarray:
    if mode == "pixel":
        return radiance[:, r, c].copy()
    if mode != "patch":
        raise ContractError(f"mode must be pixel or patch, got {mode!r}")
    k = patch_side // 2
    rows = np.clip(np.arange(r - k, r + k + 1), 0, radiance.shape[1] - 1)
    cols = np.clip(np.arange(c - k, c + k + 1), 0, radiance.shape[2] - 1)
    return radiance[:, rows[:, None], cols[None, :]]


def batches(cube: HsiCube, split_tag, batch_size: int, rng: np.random.Generator | None = None,
            shuffle: bool = False, mode: str = "pixel", patch_side: int = 7) -> Iterator[list[Sample]]:
    """One epoch over the tagged pixels; raster order unless ``shuffle``."""
    if batch_size < 1:
        raise ContractError("batch_size must be at least 1")
    locs = cube.locations(split_tag)
    if shuffle:
        if rng is None:
            raise ContractError("shuffling needs an rng")
        locs = locs[rng.permutation(len(locs))]
    for i in range(0, len(locs), batch_size):
        yield [extract(cube, loc, mode, patch_side) for loc in locs[i:i + batch_size]]


def stack(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.features for s in samples]), np.array([s.label for s in samples])


def synth_dataset(seed: int, K: int = 4, m: int = 32, per_class: int = 100,
                  noise: float = 0.05, width: int = 16) -> HsiCube:
    """Separable toy scene: a smooth base spectrum with class-specific Gaussian dips.

    Class k occupies a horizontal stripe of ``per_class`` pixels; each class
    is split 50/50 into train and test at random.  Leftover stripe cells
    stay unlabeled and carry the undipped base spectrum.
    """
    if K < 2:
        raise ContractError("synthetic dataset needs K >= 2")
    rng = np.random.Generator(np.random.PCG64(seed))
    wl = np.linspace(0.0, 1.0, m)
    base = 1.0 + 0.3 * np.sin(2 * np.pi * wl) + 0.2 * wl
    width = max(1, min(width, per_class))
    rows_per = -(-per_class // width)
    height = rows_per * K
    radiance = np.empty((m, height, width))
    labels = np.zeros((height, width), dtype=np.int64)
    split = np.zeros((height, width), dtype=np.uint8)
    for k in range(K):
        centre = (k + 0.5) / K + rng.uniform(-0.2, 0.2) / K
        extra = rng.uniform(0.05, 0.95)
        curve = base - 0.5 * np.exp(-0.5 * ((wl - centre) / 0.04) ** 2) \
            - 0.2 * np.exp(-0.5 * ((wl - extra) / 0.06) ** 2)
        stripe = slice(k * rows_per, (k + 1) * rows_per)
        cells = np.arange(rows_per * width)
        lab = cells < per_class
        spectra = np.where(lab[:, None], curve[None, :], base[None, :])
        spectra = spectra + noise * rng.standard_normal(spectra.shape)
        radiance[:, stripe, :] = spectra.T.reshape(m, rows_per, width)
        labels[stripe, :] = np.where(lab, k + 1, 0).reshape(rows_per, width)
        tags = np.zeros(rows_per * width, dtype=np.uint8)
        order = rng.permutation(per_class)
        tags[order[: per_class // 2]] = TRAIN
        tags[order[per_class // 2:]] = TEST
        split[stripe, :] = tags.reshape(rows_per, width)
    return HsiCube(radiance.astype(np.float32), labels, split, K)


def from_arrays(cube: np.ndarray, train_map: np.ndarray, test_map: np.ndarray,
                classes: int | None = None, band_axis: int = -1) -> HsiCube:
    """Assemble a cube from a radiance array and per-pixel train/test label maps.

    Third-party scenes usually ship as ``(height, width, bands)`` arrays
    with two label rasters (0 = not in that set); this is the layout used
    by the publicly released splits.
    """
    rad = np.moveaxis(np.asarray(cube, dtype=np.float64), band_axis, 0)
    train_map = np.asarray(train_map, dtype=np.int64)
    test_map = np.asarray(test_map, dtype=np.int64)
    if train_map.shape != rad.shape[1:] or test_map.shape != rad.shape[1:]:
        raise DataError(f"label maps {train_map.shape}/{test_map.shape} do not match cube {rad.shape}")
    if np.any((train_map > 0) & (test_map > 0)):
        raise DataError("train and test maps overlap")
    labels = np.maximum(train_map, test_map)
    split = np.where(train_map > 0, TRAIN, np.where(test_map > 0, TEST, NONE)).astype(np.uint8)
    k = int(classes if classes is not None else labels.max())
    out = HsiCube(rad.astype(np.float32), labels, split, k)
    out.validate()
    return out


def convert(src, dst, cube_key: str = "input", train_key: str = "TR", test_key: str = "TE",
            dataset: str | None = None) -> HsiCube:
    """Write an HSIF file from a ``.mat`` or ``.npz`` archive holding cube and split maps."""
    src = Path(src)
    if src.suffix == ".mat":
        from scipy.io import loadmat

        arrays = loadmat(src)
    elif src.suffix == ".npz":
        arrays = dict(np.load(src))
    else:
        raise DataError(f"unsupported input format {src.suffix!r} (expected .mat or .npz)")
    missing = [k for k in (cube_key, train_key, test_key) if k not in arrays]
    if missing:
        raise DataError(f"{src}: missing arrays {missing}; found {sorted(k for k in arrays if not k.startswith('__'))}")
    classes = len(PUBLISHED_SPLITS[dataset]) if dataset else None
    cube = from_arrays(arrays[cube_key], arrays[train_key], arrays[test_key], classes)
    if dataset:
        got = split_counts(cube)
        if got != PUBLISHED_SPLITS[dataset]:
            raise DataError(f"split counts {got} differ from the published {dataset} split")
    save_cube(cube, dst)
    return cube
