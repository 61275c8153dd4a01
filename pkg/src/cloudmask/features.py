"""Hand-crafted per-pixel inputs for the MLP and GBM baselines.

Three configurations:

* ``bands``: blue, red, nir, swir (4 values)
* ``feat``:  bands plus ten spectral indices (14)
* ``all``:   feat plus mean and population std of each band over 3x3 and
  5x5 windows (30)

The ten indices are a stand-in set built from standard cloud/vegetation
ratios; ``SPECTRAL_NAMES`` lists them in order. A JSON schema file (a
list of names) can reorder or subset any configuration.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import BAND_NAMES, Raster
from .errors import ConfigError, DataError

SPECTRAL_NAMES = ("ndvi", "ndsi", "brightness", "blue_minus_red", "blue_minus_nir",
                  "blue_over_red", "blue_over_swir", "nir_over_swir", "band_max", "band_min")
WINDOWS = (3, 5)
SPATIAL_NAMES = tuple(f"{band}_{stat}{w}" for w in WINDOWS for band in BAND_NAMES for stat in ("mean", "std"))
CONFIGS = {
    "bands": BAND_NAMES,
    "feat": BAND_NAMES + SPECTRAL_NAMES,
    "all": BAND_NAMES + SPECTRAL_NAMES + SPATIAL_NAMES,
}
DENOM_GUARD = 1e-9


@dataclass
class FeatureVector:
    values: np.ndarray
    schema: tuple[str, ...]

    def __post_init__(self):
        if len(self.values) != len(self.schema):
            raise ValueError("feature values and schema differ in length")


def _safe_div(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    ok = np.abs(den) >= DENOM_GUARD
    return np.where(ok, num / np.where(ok, den, 1.0), 0.0)


def spectral_features(b, r, n, s) -> np.ndarray:
    """Ten spectral indices; inputs may be scalars or equal-shape arrays (last axis = feature)."""
    b, r, n, s = (np.asarray(v, dtype=np.float64) for v in (b, r, n, s))
    if not all(np.all(np.isfinite(v)) for v in (b, r, n, s)):
        raise DataError("non-finite band value")
    stack = np.stack([b, r, n, s])
    return np.stack([
        _safe_div(n - r, n + r),
        _safe_div(b - s, b + s),
        (b + r + n + s) / 4.0,
        b - r,
        b - n,
        _safe_div(b, r),
        _safe_div(b, s),
        _safe_div(n, s),
        stack.max(axis=0),
        stack.min(axis=0),
    ], axis=-1)


def _check_window(raster: Raster, rows: np.ndarray, cols: np.ndarray, window: int) -> None:
    half = window // 2
    if len(rows) and (rows.min() < half or cols.min() < half or rows.max() >= raster.height - half
                      or cols.max() >= raster.width - half):
        raise DataError(f"{window}x{window} window out of bounds for a {raster.width}x{raster.height} raster")


def spatial_features_at(raster: Raster, rows: np.ndarray, cols: np.ndarray,
                        windows: Sequence[int] = WINDOWS) -> np.ndarray:
    """Per-band window mean and population std, ordered window, band, (mean, std)."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    out = []
    bands = raster.bands.astype(np.float64)
    for w in windows:
        _check_window(raster, rows, cols, w)
        half = w // 2
        patches = sliding_window_view(bands, (w, w), axis=(1, 2))[:, rows - half, cols - half]
        mean = patches.mean(axis=(-1, -2))
        std = patches.std(axis=(-1, -2))
        out.append(np.stack([mean, std], axis=-1).transpose(1, 0, 2).reshape(len(rows), -1))
    return np.concatenate(out, axis=1)


def spatial_features(raster: Raster, row: int, col: int, windows: Sequence[int] = WINDOWS) -> np.ndarray:
    return spatial_features_at(raster, np.array([row]), np.array([col]), windows)[0]


def load_schema(path) -> list[str]:
    names = json.loads(Path(path).read_text())
    if not isinstance(names, list) or not all(isinstance(n, str) for n in names):
        raise ConfigError(f"{path}: schema must be a JSON list of feature names")
    return names


def resolve_schema(config: str, schema: Optional[Sequence[str]] = None) -> tuple[str, ...]:
    if config not in CONFIGS:
        raise ConfigError(f"unknown input configuration {config!r}; expected one of {sorted(CONFIGS)}")
    if schema is None:
        return tuple(CONFIGS[config])
    unknown = [n for n in schema if n not in CONFIGS[config]]
    if unknown:
        raise ConfigError(f"schema names not available in {config!r}: {unknown}")
    if len(set(schema)) != len(schema):
        raise ConfigError("schema contains duplicate feature names")
    return tuple(schema)


def build_feature_dataset(raster: Raster, config: str, positions: np.ndarray,
                          schema: Optional[Sequence[str]] = None) -> tuple[np.ndarray, tuple[str, ...], Optional[np.ndarray]]:
    """Return ``(features (n, f), names, labels or None)`` for centers ``positions`` (n, 2)."""
    names = resolve_schema(config, schema)
    positions = np.asarray(positions, dtype=np.int64).reshape(-1, 2)
    rows, cols = positions[:, 0], positions[:, 1]
    _check_window(raster, rows, cols, 1)
    px = raster.bands[:, rows, cols].astype(np.float64).T
    blocks = [px]
    full = list(BAND_NAMES)
    if config in ("feat", "all"):
        blocks.append(spectral_features(*px.T))
        full += SPECTRAL_NAMES
    if config == "all":
        blocks.append(spatial_features_at(raster, rows, cols))
        full += SPATIAL_NAMES
    values = np.concatenate(blocks, axis=1)
    index = [full.index(n) for n in names]
    labels = None if raster.labels is None else raster.labels[rows, cols].copy()
    return values[:, index], names, labels


def feature_vector(raster: Raster, config: str, row: int, col: int,
                   schema: Optional[Sequence[str]] = None) -> FeatureVector:
    values, names, _ = build_feature_dataset(raster, config, np.array([[row, col]]), schema)
    return FeatureVector(values[0], names)
