"""Seeded synthetic 4-band scenes with cloud labels.

The background mixes water, vegetation and bright bare soil through
smooth random fields; clouds are the top ``cloud_fraction`` of another
smooth field, with opacity that fades to zero at the blob edges. Faint
cloud margins and bright soil overlap spectrally, and per-pixel noise
is added on top, so a single pixel is often ambiguous while its
neighbourhood is not. Each cloud darkens the ground a fixed distance away
along a per-scene sun direction (its shadow).
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from .data import Raster
from .errors import DataError

# blue, red, nir, swir top-of-atmosphere reflectance
WATER = np.array([0.08, 0.05, 0.03, 0.01])
VEGETATION = np.array([0.05, 0.06, 0.34, 0.17])
SOIL = np.array([0.20, 0.28, 0.36, 0.40])
CLOUD = np.array([0.52, 0.50, 0.52, 0.40])

DEFAULT_CLOUD_FRACTION = 0.4
DEFAULT_NOISE = 0.04
# depth (in cloud-field std units) over which opacity ramps from 0 to full
EDGE_RAMP = 1.2
EDGE_GAMMA = 1.5
# smoothing scale (pixels) of the cloud field
CLOUD_SCALE = 14.0
# shadows fall SHADOW_DISTANCE pixels from their cloud along a per-scene sun azimuth
SHADOW_DISTANCE = 12.0
SHADOW_DARKENING = 0.6


def _field(rng: np.random.Generator, shape: tuple[int, int], sigma: float) -> np.ndarray:
    f = gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return (f - f.mean()) / (f.std() + 1e-12)


def _top_fraction(field: np.ndarray, fraction: float) -> np.ndarray:
    n = field.size
    k = int(round(fraction * n))
    if 0.0 < fraction < 1.0:
        k = min(max(k, 1), n - 1)
    mask = np.zeros(n, dtype=bool)
    if k:
        mask[np.argsort(field, axis=None, kind="stable")[n - k:]] = True
    return mask.reshape(field.shape)


def synth_scene(width: int = 256, height: int = 256, seed: int = 0,
                cloud_fraction: float = DEFAULT_CLOUD_FRACTION, noise_level: float = DEFAULT_NOISE) -> Raster:
    if width < 64 or height < 64:
        raise DataError(f"synthetic scenes need both dimensions >= 64, got {width}x{height}")
    if not 0.0 <= cloud_fraction <= 1.0:
        raise DataError(f"cloud_fraction must be in [0, 1], got {cloud_fraction}")
    if noise_level < 0:
        raise DataError("noise_level must be >= 0")
    rng = np.random.default_rng(seed)
    shape = (height, width)

    # surface: water vs land, and vegetation vs bright soil on land
    water = 1.0 / (1.0 + np.exp(4.0 * (_field(rng, shape, 20.0) + 0.6)))
    soil = 1.0 / (1.0 + np.exp(-3.0 * (_field(rng, shape, 10.0) - 0.5)))
    land = VEGETATION[:, None, None] * (1 - soil) + SOIL[:, None, None] * soil
    surface = WATER[:, None, None] * water + land * (1 - water)
    surface = surface * (1.0 + 0.15 * _field(rng, shape, 3.0))

    # clouds: smooth blobs whose opacity ramps up from the edge
    cfield = _field(rng, shape, CLOUD_SCALE) + 0.35 * _field(rng, shape, 3.0)
    labels = _top_fraction(cfield, cloud_fraction)
    if labels.any():
        edge = cfield[labels].min()
        depth = np.clip(cfield - edge, 0.0, None)
        thickness = 0.6 + 0.4 * np.clip(_field(rng, shape, 16.0), -1.5, 1.5) / 1.5
        ramp = np.clip(depth / EDGE_RAMP, 0.0, 1.0) ** EDGE_GAMMA
        opacity = np.where(labels, ramp * thickness, 0.0)
        texture = 1.0 + 0.12 * _field(rng, shape, 1.5)
        cloud = CLOUD[:, None, None] * texture
        azimuth = rng.uniform(0.0, 2.0 * np.pi)
        shift = (int(round(SHADOW_DISTANCE * np.sin(azimuth))), int(round(SHADOW_DISTANCE * np.cos(azimuth))))
        shadow = np.roll(opacity, shift, axis=(0, 1))
        surface = surface * (1.0 - SHADOW_DARKENING * shadow)
        bands = surface * (1.0 - opacity) + cloud * opacity
    else:
        bands = surface

    bands = bands + noise_level * rng.standard_normal(bands.shape)
    bands = np.clip(bands, 0.0, 2.0).astype(np.float32)
    return Raster(bands, labels.astype(np.uint8))
