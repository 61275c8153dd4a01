"""Rasters, the MSPC file format, patch extraction, balancing and flip augmentation.

MSPC v1 (little endian, no padding)::

    b"MSP1" | u32 width | u32 height | u32 channels | u32 label_flag
    | channels*height*width float32, band-sequential
    | height*width uint8 labels (only if label_flag == 1)

Labels are 0 = clear, 1 = cloud, 255 = unlabeled.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DataError, FormatError

MSPC_MAGIC = b"MSP1"
_HEADER = struct.Struct("<4sIIII")
UNLABELED = 255
BAND_NAMES = ("blue", "red", "nir", "swir")
TARGET_SIZE = 9


@dataclass
class Raster:
    bands: np.ndarray                    # (channels, height, width) float32
    labels: Optional[np.ndarray] = None  # (height, width) uint8

    def __post_init__(self):
        self.bands = np.ascontiguousarray(self.bands, dtype=np.float32)
        if self.bands.ndim != 3:
            raise DataError(f"bands must be (channels, height, width), got {self.bands.shape}")
        if self.labels is not None:
            self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
            if self.labels.shape != self.bands.shape[1:]:
                raise DataError(f"labels {self.labels.shape} do not match bands {self.bands.shape[1:]}")

    @property
    def channels(self) -> int:
        return self.bands.shape[0]

    @property
    def height(self) -> int:
        return self.bands.shape[1]

    @property
    def width(self) -> int:
        return self.bands.shape[2]


def save_raster(raster: Raster, path) -> None:
    flag = 0 if raster.labels is None else 1
    header = _HEADER.pack(MSPC_MAGIC, raster.width, raster.height, raster.channels, flag)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(raster.bands.astype("<f4").tobytes())
        if flag:
            fh.write(raster.labels.tobytes())


def load_raster(path) -> Raster:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(blob)} of {_HEADER.size} bytes)")
    magic, width, height, channels, flag = _HEADER.unpack_from(blob)
    if magic != MSPC_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MSPC_MAGIC!r}")
    if flag not in (0, 1):
        raise FormatError(f"{path}: label_flag must be 0 or 1, got {flag}")
    if min(width, height, channels) < 1:
        raise FormatError(f"{path}: degenerate dimensions {width}x{height}x{channels}")
    band_bytes = 4 * width * height * channels
    label_bytes = width * height if flag else 0
    payload = len(blob) - _HEADER.size
    expected = band_bytes + label_bytes
    if payload < expected:
        raise FormatError(f"{path}: truncated payload, expected {expected} bytes after the header "
                          f"({channels} channels of {width}x{height} float32"
                          f"{' plus labels' if flag else ''}), found {payload}")
    if payload > expected:
        hint = " (label_flag is 0 but label bytes are present)" if payload == expected + width * height else ""
        raise FormatError(f"{path}: payload has {payload} bytes, expected {expected}{hint}")
    bands = np.frombuffer(blob, dtype="<f4", count=band_bytes // 4, offset=_HEADER.size)
    bands = bands.reshape(channels, height, width).astype(np.float32)
    labels = None
    if flag:
        labels = np.frombuffer(blob, dtype=np.uint8, offset=_HEADER.size + band_bytes).reshape(height, width).copy()
    return Raster(bands, labels)


@dataclass
class PatchSample:
    x: np.ndarray                 # (1, channels, P, P)
    y: Union[int, np.ndarray]     # 0/1 or a 9x9 grid
    source: tuple[int, int, int]  # (raster id, row, col) of the center


@dataclass
class PatchSet:
    """Column-oriented batch of samples; ``x`` stays float32 to bound memory."""

    x: np.ndarray          # (n, channels, P, P) float32
    y: np.ndarray          # (n,) or (n, 9, 9) uint8
    positions: np.ndarray  # (n, 3) int: raster id, row, col

    def __len__(self) -> int:
        return len(self.x)

    def __getitem__(self, i: int) -> PatchSample:
        y = self.y[i]
        return PatchSample(self.x[i:i + 1].astype(np.float64), int(y) if y.ndim == 0 else y.copy(),
                           tuple(int(v) for v in self.positions[i]))

    @property
    def target(self) -> str:
        return "pixel" if self.y.ndim == 1 else "patch9"

    @property
    def center_labels(self) -> np.ndarray:
        if self.y.ndim == 1:
            return self.y
        return self.y[:, TARGET_SIZE // 2, TARGET_SIZE // 2]

    def subset(self, idx) -> "PatchSet":
        return PatchSet(self.x[idx], self.y[idx], self.positions[idx])

    @staticmethod
    def concat(parts: Sequence["PatchSet"]) -> "PatchSet":
        return PatchSet(np.concatenate([p.x for p in parts]), np.concatenate([p.y for p in parts]),
                        np.concatenate([p.positions for p in parts]))


def valid_centers(raster: Raster, patch_size: int, target: str = "pixel") -> np.ndarray:
    """All (row, col) centers whose patch fits and whose target is fully labeled."""
    if raster.labels is None:
        raise DataError("raster has no labels")
    half = patch_size // 2
    h, w = raster.height, raster.width
    if h < patch_size or w < patch_size:
        raise DataError(f"raster {w}x{h} is smaller than the {patch_size}x{patch_size} patch")
    ok = np.zeros((h, w), dtype=bool)
    if target == "pixel":
        ok[half:h - half, half:w - half] = raster.labels[half:h - half, half:w - half] != UNLABELED
    elif target == "patch9":
        t = TARGET_SIZE // 2
        bad = sliding_window_view(raster.labels == UNLABELED, (TARGET_SIZE, TARGET_SIZE)).any(axis=(-1, -2))
        inner = ~bad  # bad[r - t, c - t] covers the window centered at (r, c)
        ok[t:h - t, t:w - t] = inner
        ok[:half, :] = ok[h - half:, :] = False
        ok[:, :half] = ok[:, w - half:] = False
    else:
        raise DataError(f"unknown target mode {target!r}")
    return np.argwhere(ok)


def extract_patches(raster: Raster, patch_size: int, target: str = "pixel",
                    positions: Optional[np.ndarray] = None, raster_id: int = 0) -> PatchSet:
    """Cut P x P windows (all channels) centered on ``positions`` (default: every valid center)."""
    if positions is None:
        positions = valid_centers(raster, patch_size, target)
    positions = np.asarray(positions, dtype=np.int64).reshape(-1, 2)
    half = patch_size // 2
    h, w = raster.height, raster.width
    rows, cols = positions[:, 0], positions[:, 1]
    if len(positions) and (rows.min() < half or cols.min() < half or rows.max() >= h - half
                           or cols.max() >= w - half):
        raise DataError(f"patch center out of bounds for a {patch_size}x{patch_size} patch on {w}x{h}")
    windows = sliding_window_view(raster.bands, (patch_size, patch_size), axis=(1, 2))
    x = windows[:, rows - half, cols - half].transpose(1, 0, 2, 3).astype(np.float32)
    if raster.labels is None:
        raise DataError("raster has no labels")
    if target == "pixel":
        y = raster.labels[rows, cols]
        if np.any(y == UNLABELED):
            raise DataError("unlabeled pixel used as a patch target")
    elif target == "patch9":
        t = TARGET_SIZE // 2
        lw = sliding_window_view(raster.labels, (TARGET_SIZE, TARGET_SIZE))
        if rows.min(initial=t) < t or cols.min(initial=t) < t:
            raise DataError("9x9 target out of bounds")
        y = lw[rows - t, cols - t].copy()
        if np.any(y == UNLABELED):
            raise DataError("unlabeled pixel inside a 9x9 target")
    else:
        raise DataError(f"unknown target mode {target!r}")
    pos = np.column_stack([np.full(len(positions), raster_id), rows, cols])
    return PatchSet(np.ascontiguousarray(x), np.asarray(y, dtype=np.uint8), pos)


def balance_indices(labels: np.ndarray, seed: int, per_class: Optional[int] = None) -> np.ndarray:
    """Seeded equal-count selection of class-0 and class-1 indices, shuffled.

    ``per_class`` defaults to the size of the minority class.
    """
    labels = np.asarray(labels)
    zeros = np.flatnonzero(labels == 0)
    ones = np.flatnonzero(labels == 1)
    if len(zeros) == 0 or len(ones) == 0:
        raise DataError(f"cannot balance: {len(zeros)} clear and {len(ones)} cloud samples")
    k = min(len(zeros), len(ones))
    if per_class is not None:
        if per_class > k:
            raise DataError(f"asked for {per_class} samples per class, minority class has {k}")
        k = per_class
    rng = np.random.default_rng(seed)
    chosen = np.concatenate([rng.choice(zeros, k, replace=False), rng.choice(ones, k, replace=False)])
    return rng.permutation(chosen)


def balance(samples: PatchSet, seed: int, per_class: Optional[int] = None) -> PatchSet:
    """Keep an equal number of clear and cloud samples (patch targets key on their center)."""
    return samples.subset(balance_indices(samples.center_labels, seed, per_class))


def flip_lr(a: np.ndarray) -> np.ndarray:
    return a[..., ::-1]


def flip_ud(a: np.ndarray) -> np.ndarray:
    return a[..., ::-1, :]


def augment_flips(samples: PatchSet) -> PatchSet:
    """Originals, then left-right flips, then up-down flips (3x the input size).

    Patch targets flip with their inputs; scalar targets are untouched
    since the center pixel is fixed under both flips.
    """
    if samples.y.ndim == 1:
        y_lr = y_ud = samples.y
    else:
        y_lr, y_ud = flip_lr(samples.y), flip_ud(samples.y)
    return PatchSet(
        np.ascontiguousarray(np.concatenate([samples.x, flip_lr(samples.x), flip_ud(samples.x)])),
        np.ascontiguousarray(np.concatenate([samples.y, y_lr, y_ud])),
        np.concatenate([samples.positions] * 3),
    )
