"""Whole-raster inference: a uniform wrapper over the trained model kinds,
probability maps (pixel, center, overlap-mean, stride-9 tiling) and the
per-batch timing harness."""

from __future__ import annotations

import json
import os
import time
from contextlib import nullcontext
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from numpy.lib.stride_tricks import sliding_window_view
from threadpoolctl import threadpool_limits

from .data import TARGET_SIZE, Raster
from .errors import ConfigError, DataError, FormatError
from .features import build_feature_dataset
from .gbm import GBM_FORMAT, GbmModel, predict_gbm
from .model import ModelSpec, ModelWeights, forward, load_weights, save_weights

T = TARGET_SIZE // 2


def thread_limit(threads: Optional[int]):
    if threads is None:
        return nullcontext()
    return threadpool_limits(limits=int(threads))


@dataclass
class Classifier:
    """A trained cloudnet, MLP or GBM together with its input preparation.

    ``forward_samples``/``forward_batches`` count every network
    evaluation so callers can audit how many passes a map needed.
    """

    kind: str                              # cloudnet | mlp | gbm
    spec: Optional[ModelSpec] = None
    weights: Optional[ModelWeights] = None
    gbm: Optional[GbmModel] = None
    input_config: Optional[str] = None
    schema: Optional[tuple[str, ...]] = None
    feature_mean: Optional[np.ndarray] = None
    feature_std: Optional[np.ndarray] = None
    forward_samples: int = 0
    forward_batches: int = 0

    @classmethod
    def from_network(cls, spec: ModelSpec, weights: ModelWeights) -> "Classifier":
        pre = spec.preprocess
        if spec.family == "mlp":
            return cls("mlp", spec, weights, input_config=pre["input_config"],
                       schema=tuple(pre["schema"]), feature_mean=np.asarray(pre["mean"]),
                       feature_std=np.asarray(pre["std"]))
        return cls("cloudnet", spec, weights)

    @property
    def output_mode(self) -> str:
        return self.spec.output_mode if self.spec is not None else "pixel"

    @property
    def patch_size(self) -> int:
        """Side of the input footprint around a center pixel."""
        if self.kind == "cloudnet":
            return self.spec.patch_size
        return 5 if self.input_config == "all" else 1

    @property
    def margin(self) -> int:
        return self.patch_size // 2

    def reset_counters(self) -> None:
        self.forward_samples = 0
        self.forward_batches = 0

    def features(self, raster: Raster, centers: np.ndarray) -> np.ndarray:
        values, _, _ = build_feature_dataset(raster, self.input_config, centers, self.schema)
        if self.feature_mean is not None:
            values = (values - self.feature_mean) / self.feature_std
        return values

    def predict_inputs(self, x: np.ndarray) -> np.ndarray:
        """Probabilities for already-prepared inputs: (n,) or (n, 9, 9)."""
        if self.kind == "gbm":
            return predict_gbm(self.gbm, x)
        pred, _ = forward(self.spec, self.weights, x, training=False)
        self.forward_samples += len(x)
        self.forward_batches += 1
        if self.spec.output_units == 1:
            return pred[:, 0]
        return pred.reshape(len(x), TARGET_SIZE, TARGET_SIZE)

    def predict_centers(self, raster: Raster, centers: np.ndarray, batch_size: int = 128) -> np.ndarray:
        centers = np.asarray(centers, dtype=np.int64).reshape(-1, 2)
        shape = (len(centers),) if self.output_mode == "pixel" else (len(centers), TARGET_SIZE, TARGET_SIZE)
        out = np.empty(shape)
        for start in range(0, len(centers), batch_size):
            chunk = centers[start:start + batch_size]
            if self.kind == "cloudnet":
                x = _patches(raster, self.patch_size, chunk)
            else:
                x = self.features(raster, chunk)
            out[start:start + len(chunk)] = self.predict_inputs(x)
        return out

    def save(self, path) -> None:
        if self.kind == "gbm":
            d = self.gbm.to_dict()
            d["input_config"] = self.input_config
            d["schema"] = list(self.schema)
            base = Path(path)
            if base.suffix in (".json", ".bin"):
                base = base.with_suffix("")
            base.parent.mkdir(parents=True, exist_ok=True)
            base.with_name(base.name + ".json").write_text(json.dumps(d))
        else:
            save_weights(self.spec, self.weights, path)


def _patches(raster: Raster, patch_size: int, centers: np.ndarray) -> np.ndarray:
    half = patch_size // 2
    windows = sliding_window_view(raster.bands, (patch_size, patch_size), axis=(1, 2))
    if len(centers) and (centers.min() < half or centers[:, 0].max() >= raster.height - half
                         or centers[:, 1].max() >= raster.width - half):
        raise DataError("patch center out of bounds")
    return windows[:, centers[:, 0] - half, centers[:, 1] - half].transpose(1, 0, 2, 3)


def load_classifier(path) -> Classifier:
    base = Path(path)
    if base.suffix in (".json", ".bin"):
        base = base.with_suffix("")
    manifest = base.with_name(base.name + ".json")
    try:
        head = json.loads(manifest.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read model {manifest}: {exc}") from exc
    if head.get("format") == GBM_FORMAT:
        model = GbmModel.from_dict(head)
        return Classifier("gbm", gbm=model, input_config=head["input_config"],
                          schema=tuple(head["schema"]))
    spec, weights = load_weights(base)
    return Classifier.from_network(spec, weights)


def valid_region(raster: Raster, margin: int) -> tuple[slice, slice]:
    if raster.height <= 2 * margin or raster.width <= 2 * margin:
        raise DataError(f"raster {raster.width}x{raster.height} is smaller than the model footprint")
    return slice(margin, raster.height - margin), slice(margin, raster.width - margin)


def _grid_centers(rs: slice, cs: slice, stride: int) -> np.ndarray:
    rows = np.arange(rs.start, rs.stop, stride)
    cols = np.arange(cs.start, cs.stop, stride)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return np.column_stack([rr.ravel(), cc.ravel()])


def tile_starts(lo: int, hi: int, size: int = TARGET_SIZE) -> np.ndarray:
    """Start offsets of ``size``-wide tiles covering [lo, hi); the last tile is shifted back to fit."""
    if hi - lo < size:
        raise DataError(f"region of {hi - lo} pixels is narrower than a {size}-pixel tile")
    starts = list(range(lo, hi - size + 1, size))
    if starts[-1] + size < hi:
        starts.append(hi - size)
    return np.asarray(starts)


def aggregate_overlaps(raster: Raster, model: Classifier, mode: str = "mean", stride: int = 1,
                       batch_size: int = 128) -> np.ndarray:
    """Probability map from a patch9 model; NaN marks pixels without a prediction.

    ``center`` keeps each window's central output; ``mean`` averages, per
    pixel, every 9x9 output covering it (stride 1 gives 81 windows per
    interior pixel); ``tile`` lays 9x9 outputs edge to edge. Maps cover
    the same valid region as a patch-to-pixel model of equal input size.
    """
    if model.output_mode != "patch9":
        raise ConfigError("aggregate_overlaps needs a patch9 model")
    if stride < 1:
        raise ConfigError("stride must be >= 1")
    rs, cs = valid_region(raster, model.margin)
    out = np.full((raster.height, raster.width), np.nan)
    if mode == "center":
        centers = _grid_centers(rs, cs, stride)
        pred = model.predict_centers(raster, centers, batch_size)
        out[centers[:, 0], centers[:, 1]] = pred[:, T, T]
        return out
    if mode == "tile":
        rows = tile_starts(rs.start, rs.stop) + T
        cols = tile_starts(cs.start, cs.stop) + T
        rr, cc = np.meshgrid(rows, cols, indexing="ij")
        centers = np.column_stack([rr.ravel(), cc.ravel()])
        pred = model.predict_centers(raster, centers, batch_size)
        for (r, c), p in zip(centers, pred):
            out[r - T:r + T + 1, c - T:c + T + 1] = p
        return out
    if mode != "mean":
        raise ConfigError(f"unknown aggregation mode {mode!r}")
    centers = _grid_centers(rs, cs, stride)
    pred = model.predict_centers(raster, centers, batch_size)
    return accumulate_windows(raster.height, raster.width, centers, pred, rs, cs)


def accumulate_windows(height: int, width: int, centers: np.ndarray, pred: np.ndarray,
                       rs: slice, cs: slice) -> np.ndarray:
    total = np.zeros((height, width))
    count = np.zeros((height, width))
    rows, cols = centers[:, 0], centers[:, 1]
    for du in range(TARGET_SIZE):
        for dv in range(TARGET_SIZE):
            r = rows + du - T
            c = cols + dv - T
            np.add.at(total, (r, c), pred[:, du, dv])
            np.add.at(count, (r, c), 1.0)
    out = np.full((height, width), np.nan)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = total / count
    out[rs, cs] = np.where(count[rs, cs] > 0, mean[rs, cs], np.nan)
    return out


def predict_raster(raster: Raster, model: Classifier, mode: str = "pixel", stride: int = 1,
                   batch_size: int = 128) -> np.ndarray:
    """Probability map over the raster; NaN outside the predicted region."""
    if model.output_mode == "patch9":
        if mode == "pixel":
            mode = "center"
        return aggregate_overlaps(raster, model, mode, stride, batch_size)
    if mode not in ("pixel", "center"):
        raise ConfigError(f"mode {mode!r} needs a patch9 model")
    rs, cs = valid_region(raster, model.margin)
    centers = _grid_centers(rs, cs, stride)
    out = np.full((raster.height, raster.width), np.nan)
    out[centers[:, 0], centers[:, 1]] = model.predict_centers(raster, centers, batch_size)
    return out


def bench_inference(model: Classifier, batch_count: int = 10, batch_size: int = 128, threads: int = 1,
                    seed: int = 0, warmup: int = 3) -> dict:
    """Wall-clock seconds per batch of random patches, after ``warmup`` discarded batches."""
    if batch_count < 10:
        raise ConfigError("bench_inference needs at least 10 batches")
    if model.kind != "cloudnet":
        raise ConfigError("timing is defined for cloudnet models")
    rng = np.random.default_rng(seed)
    shape = (batch_size,) + tuple(model.spec.input_shape)
    times = []
    with thread_limit(threads):
        for i in range(batch_count + warmup):
            x = rng.uniform(0.0, 0.6, shape)
            start = time.perf_counter()
            model.predict_inputs(x)
            elapsed = time.perf_counter() - start
            if i >= warmup:
                times.append(elapsed)
    times = np.asarray(times)
    per_sample = TARGET_SIZE * TARGET_SIZE if model.output_mode == "patch9" else 1
    mean = float(times.mean())
    return {"mean_s": mean, "std_s": float(times.std()), "batches": int(batch_count), "threads": int(threads),
            "batch_size": int(batch_size), "pixels_per_sample": per_sample,
            "pixels_per_second": batch_size * per_sample / mean}


def cpu_threads() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)
