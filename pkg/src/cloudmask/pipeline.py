"""Run configuration and the sample -> fit path shared by the CLI and the experiment runner.

A run config is a JSON object; every key is optional except ``model`` and
(for ``cloudmask train``) ``train`` and ``model_out``::

    {"model": "cloudnet17", "output_mode": "pixel", "input_config": "all",
     "samples": 20000, "augment": false, "seed": 0,
     "batch_size": 128, "epochs": 30, "lr": 0.001,
     "widths": [32, 32, 64, 64], "hidden": 256, "mlp_hidden": [64, 64],
     "gbm": {"n_trees": 200, "max_depth": 3, "shrinkage": 0.1, "min_leaf": 5},
     "schema": null, "footprint": null,
     "train": ["scene0.mspc"], "model_out": "model", "history_out": null}
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import PatchSet, Raster, augment_flips, balance_indices, extract_patches, valid_centers
from .errors import ConfigError, DataError
from .features import build_feature_dataset, load_schema, resolve_schema
from .gbm import fit_gbm
from .inference import Classifier
from .model import build_cloudnet, build_mlp
from .training import TrainConfig, train

MODELS = {"cloudnet17": 17, "cloudnet33": 33, "mlp": None, "gbm": None}
FEATURE_STD_GUARD = 1e-9


@dataclass
class RunConfig:
    model: str = "cloudnet17"
    output_mode: str = "pixel"
    input_config: str = "all"
    samples: Optional[int] = 20000
    augment: bool = False
    seed: int = 0
    batch_size: int = 128
    epochs: int = 30
    lr: float = 1e-3
    widths: tuple[int, int, int, int] = (32, 32, 64, 64)
    hidden: int = 256
    mlp_hidden: tuple[int, ...] = (64, 64)
    gbm: dict = field(default_factory=lambda: {"n_trees": 200, "max_depth": 3, "shrinkage": 0.1, "min_leaf": 5})
    schema: Optional[str] = None
    footprint: Optional[int] = None  # side of the window centers must fit (default: the model's own)
    train: list = field(default_factory=list)
    model_out: Optional[str] = None
    history_out: Optional[str] = None

    def __post_init__(self):
        if self.model not in MODELS:
            raise ConfigError(f"model: unknown model {self.model!r}; expected one of {sorted(MODELS)}")
        if self.output_mode not in ("pixel", "patch9"):
            raise ConfigError(f"output_mode: expected 'pixel' or 'patch9', got {self.output_mode!r}")
        if self.output_mode == "patch9" and not self.is_network_cnn:
            raise ConfigError(f"output_mode: {self.model} models are pixel-only")
        if not self.is_network_cnn:
            resolve_schema(self.input_config)
        if self.samples is not None and (int(self.samples) < 2 or int(self.samples) % 2):
            raise ConfigError("samples: must be an even count >= 2 (balanced classes)")
        if len(self.widths) != 4:
            raise ConfigError("widths: need four conv widths")
        self.widths = tuple(int(w) for w in self.widths)
        self.mlp_hidden = tuple(int(h) for h in self.mlp_hidden)
        unknown = set(self.gbm) - {"n_trees", "max_depth", "shrinkage", "min_leaf"}
        if unknown:
            raise ConfigError(f"gbm: unknown key(s) {sorted(unknown)}")
        try:
            self.train_config()
        except ConfigError as exc:
            raise ConfigError(f"training hyperparameters: {exc}") from exc

    @property
    def is_network_cnn(self) -> bool:
        return MODELS[self.model] is not None

    @property
    def patch_size(self) -> int:
        if self.is_network_cnn:
            return MODELS[self.model]
        return 5 if self.input_config == "all" else 1

    def train_config(self) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, epochs=self.epochs, lr=self.lr, seed=self.seed,
                           augment=self.augment, output_mode=self.output_mode)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError(f"{key}: unknown config key")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        cfg = cls.from_dict(d)
        base = Path(path).parent
        cfg.train = [str(base / p) for p in cfg.train]
        if cfg.model_out is not None:
            cfg.model_out = str(base / cfg.model_out)
        if cfg.history_out is not None:
            cfg.history_out = str(base / cfg.history_out)
        if cfg.schema is not None:
            cfg.schema = str(base / cfg.schema)
        return cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def sample_positions(rasters: Sequence[Raster], footprint: int, target: str, samples: Optional[int],
                     seed: int) -> np.ndarray:
    """Balanced (raster_id, row, col) draws pooled over ``rasters``."""
    pooled = []
    labels = []
    for i, r in enumerate(rasters):
        c = valid_centers(r, footprint, target)
        pooled.append(np.column_stack([np.full(len(c), i), c]))
        labels.append(r.labels[c[:, 0], c[:, 1]])
    pooled = np.concatenate(pooled)
    per_class = None if samples is None else int(samples) // 2
    return pooled[balance_indices(np.concatenate(labels), seed, per_class)]


def gather_patches(rasters: Sequence[Raster], positions: np.ndarray, patch_size: int, target: str) -> PatchSet:
    """Patches for ``positions`` in their original order."""
    x = None
    y = None
    for i, r in enumerate(rasters):
        sel = np.flatnonzero(positions[:, 0] == i)
        if not len(sel):
            continue
        ps = extract_patches(r, patch_size, target, positions[sel, 1:], raster_id=i)
        if x is None:
            x = np.empty((len(positions),) + ps.x.shape[1:], np.float32)
            y = np.empty((len(positions),) + ps.y.shape[1:], np.uint8)
        x[sel] = ps.x
        y[sel] = ps.y
    return PatchSet(x, y, positions.copy())


def gather_features(rasters: Sequence[Raster], positions: np.ndarray, input_config: str,
                    schema: Optional[Sequence[str]] = None) -> tuple[np.ndarray, np.ndarray, tuple[str, ...]]:
    names = resolve_schema(input_config, schema)
    x = np.empty((len(positions), len(names)))
    y = np.empty(len(positions), np.uint8)
    for i, r in enumerate(rasters):
        sel = np.flatnonzero(positions[:, 0] == i)
        if len(sel):
            x[sel], _, y[sel] = build_feature_dataset(r, input_config, positions[sel, 1:], names)
    return x, y, names


def fit_on_positions(cfg: RunConfig, rasters: Sequence[Raster], positions: np.ndarray,
                     history_stream=None, on_epoch=None) -> tuple[Classifier, list[dict]]:
    """Train the configured model on the samples at ``positions`` (already balanced)."""
    if cfg.is_network_cnn:
        ps = gather_patches(rasters, positions, cfg.patch_size, cfg.output_mode)
        if cfg.augment:
            ps = augment_flips(ps)
        _check_classes(ps.center_labels)
        spec, weights = build_cloudnet(cfg.patch_size, cfg.output_mode, cfg.seed, cfg.widths, cfg.hidden)
        weights, history = train(spec, weights, ps.x, ps.y, cfg.train_config(), history_stream, on_epoch)
        return Classifier.from_network(spec, weights), history
    schema = load_schema(cfg.schema) if cfg.schema else None
    x, y, names = gather_features(rasters, positions, cfg.input_config, schema)
    _check_classes(y)
    if cfg.model == "gbm":
        model = fit_gbm(x, y, seed=cfg.seed, **cfg.gbm)
        history = [{"round": i, "train_loss": v} for i, v in enumerate(model.loss_history)]
        if history_stream is not None:
            for rec in history:
                history_stream.write(json.dumps(rec) + "\n")
        return Classifier("gbm", gbm=model, input_config=cfg.input_config, schema=names), history
    mean = x.mean(axis=0)
    std = np.maximum(x.std(axis=0), FEATURE_STD_GUARD)
    spec, weights = build_mlp(x.shape[1], cfg.mlp_hidden, cfg.seed)
    spec.preprocess = {"input_config": cfg.input_config, "schema": list(names),
                       "mean": mean.tolist(), "std": std.tolist()}
    weights, history = train(spec, weights, (x - mean) / std, y, cfg.train_config(), history_stream, on_epoch)
    return Classifier.from_network(spec, weights), history


def _check_classes(labels: np.ndarray) -> None:
    present = np.unique(labels)
    if len(present) < 2:
        raise DataError(f"training data holds a single class ({present.tolist()})")


def fit(cfg: RunConfig, rasters: Sequence[Raster], history_stream=None, on_epoch=None) -> tuple[Classifier, list[dict]]:
    footprint = cfg.footprint or cfg.patch_size
    target = cfg.output_mode if cfg.is_network_cnn else "pixel"
    for r in rasters:
        if r.labels is None:
            raise DataError("training rasters must carry labels")
        if len(np.unique(r.labels[r.labels != 255])) == 0:
            raise DataError("training raster has no labeled pixels")
    positions = sample_positions(rasters, footprint, target, cfg.samples, cfg.seed)
    return fit_on_positions(cfg, rasters, positions, history_stream, on_epoch)
