"""The experiment matrix on synthetic scenes.

Run names:

* baselines: ``mlp-bands``, ``mlp-feat``, ``mlp-all``, ``gbm-bands``, ``gbm-feat``, ``gbm-all``
* networks: ``cloudnet17-pixel``, ``cloudnet33-pixel``, ``cloudnet17-patch9``, ``cloudnet33-patch9``
* augmentation: any network name with ``-aug`` appended

For every seed the runner draws fresh train and test scenes and one
balanced set of training centers shared by all runs (centers fit a 33x33
window and a full 9x9 target, so every model sees the same pixels).
Train OA is measured in inference mode on the original, unaugmented
training samples; test OA on a balanced draw from the test scenes.
"""

from __future__ import annotations

import copy
import json
import logging
import time
from pathlib import Path
from statistics import median
from typing import Iterable, Optional

import numpy as np

from .data import Raster
from .evaluation import classify, compute_metrics, position_grid
from .inference import Classifier
from .pipeline import RunConfig, fit_on_positions, gather_features, gather_patches, sample_positions
from .synth import DEFAULT_NOISE, synth_scene

log = logging.getLogger(__name__)

FOOTPRINT = 33
BASELINE_RUNS = ("mlp-bands", "mlp-feat", "mlp-all", "gbm-bands", "gbm-feat", "gbm-all")
NETWORK_RUNS = ("cloudnet17-pixel", "cloudnet33-pixel", "cloudnet17-patch9", "cloudnet33-patch9")

# Desk protocol: narrow conv widths keep 3 seeds of the network runs within
# a single-core budget; the reference widths are 32/32/64/64 with hidden 256.
DEFAULT_PROTOCOL = {
    "scene_size": 256,
    "noise_level": DEFAULT_NOISE,
    "train_scenes": 4,
    "test_scenes": 2,
    "train_patches": 20000,
    "test_patches": 5000,
    "train_eval_patches": 5000,
    "seeds": [0, 1, 2],
    "cnn": {"widths": [8, 8, 16, 16], "hidden": 256, "lr": 1e-3, "batch_size": 128,
            "epochs": {"cloudnet17": 6, "cloudnet33": 6}},
    # augmented runs keep the optimizer-step budget: epochs are divided by 3
    "aug_same_steps": True,
    "mlp": {"hidden": [64, 64], "lr": 1e-3, "batch_size": 128, "epochs": 30},
    "gbm": {"n_trees": 100, "max_depth": 3, "shrinkage": 0.1, "min_leaf": 5},
    "runs": list(BASELINE_RUNS + NETWORK_RUNS + ("cloudnet17-pixel-aug", "cloudnet33-pixel-aug")),
}


def load_protocol(path=None, **overrides) -> dict:
    proto = copy.deepcopy(DEFAULT_PROTOCOL)
    if path is not None:
        user = json.loads(Path(path).read_text())
        unknown = set(user) - set(proto)
        if unknown:
            from .errors import ConfigError
            raise ConfigError(f"unknown protocol key(s): {sorted(unknown)}")
        for key, value in user.items():
            if isinstance(value, dict) and isinstance(proto.get(key), dict):
                proto[key] = {**proto[key], **value}
            else:
                proto[key] = value
    proto.update(overrides)
    return proto


def parse_run(name: str) -> dict:
    parts = name.split("-")
    if parts[0] in ("mlp", "gbm") and len(parts) == 2:
        return {"model": parts[0], "input_config": parts[1], "output_mode": "pixel", "augment": False}
    if parts[0] in ("cloudnet17", "cloudnet33") and len(parts) in (2, 3) and parts[1] in ("pixel", "patch9"):
        if len(parts) == 3 and parts[2] != "aug":
            raise ValueError(f"unknown run {name!r}")
        return {"model": parts[0], "output_mode": parts[1], "augment": len(parts) == 3}
    raise ValueError(f"unknown run {name!r}")


def run_config(proto: dict, name: str, seed: int) -> RunConfig:
    run = parse_run(name)
    if run["model"] in ("mlp", "gbm"):
        m = proto["mlp"]
        return RunConfig(model=run["model"], input_config=run["input_config"], seed=seed,
                         batch_size=m["batch_size"], epochs=m["epochs"], lr=m["lr"], mlp_hidden=tuple(m["hidden"]),
                         gbm=dict(proto["gbm"]), samples=proto["train_patches"])
    c = proto["cnn"]
    epochs = c["epochs"][run["model"]]
    if run["augment"] and proto.get("aug_same_steps", True):
        epochs = max(1, -(-epochs // 3))
    return RunConfig(model=run["model"], output_mode=run["output_mode"], augment=run["augment"], seed=seed,
                     batch_size=c["batch_size"], epochs=epochs, lr=c["lr"], widths=tuple(c["widths"]),
                     hidden=c["hidden"], samples=proto["train_patches"])


class SeedData:
    """Scenes and sample centers for one seed."""

    def __init__(self, proto: dict, seed: int):
        start = time.perf_counter()
        size, noise = proto["scene_size"], proto["noise_level"]
        self.seed = seed
        self.train = [synth_scene(size, size, 1000 * seed + i, noise_level=noise)
                      for i in range(proto["train_scenes"])]
        self.test = [synth_scene(size, size, 1000 * seed + 500 + i, noise_level=noise)
                     for i in range(proto["test_scenes"])]
        self.train_pos = sample_positions(self.train, FOOTPRINT, "patch9", proto["train_patches"], seed)
        self.test_pos = sample_positions(self.test, FOOTPRINT, "patch9", proto["test_patches"], seed + 7919)
        self.train_eval_pos = self.train_pos[:proto["train_eval_patches"]]
        self.seconds = time.perf_counter() - start


def _center_labels(rasters: list[Raster], pos: np.ndarray) -> np.ndarray:
    out = np.empty(len(pos), np.uint8)
    for i, r in enumerate(rasters):
        sel = pos[:, 0] == i
        out[sel] = r.labels[pos[sel, 1], pos[sel, 2]]
    return out


def predict_positions(model: Classifier, rasters: list[Raster], pos: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Probabilities at ``pos``: (n,) for pixel models, (n, 9, 9) for patch9."""
    if model.kind == "cloudnet":
        x = gather_patches(rasters, pos, model.patch_size, "pixel").x
    else:
        x, _, _ = gather_features(rasters, pos, model.input_config, model.schema)
        if model.feature_mean is not None:
            x = (x - model.feature_mean) / model.feature_std
    parts = [model.predict_inputs(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
    return np.concatenate(parts)


def _score(model: Classifier, rasters, pos) -> dict:
    prob = predict_positions(model, rasters, pos)
    truth = _center_labels(rasters, pos)
    out = {}
    if prob.ndim == 3:
        pred = classify(prob)
        target = gather_patches(rasters, pos, 1, "patch9").y
        grid = position_grid(pred, target)
        out["grid"] = grid.tolist()
        out["grid_center"] = float(grid[4, 4])
        out["grid_corner_mean"] = float(np.mean([grid[0, 0], grid[0, 8], grid[8, 0], grid[8, 8]]))
        out["patch_oa"] = float(grid.mean())
        prob = prob[:, 4, 4]
    report = compute_metrics(classify(prob), truth)
    out.update(oa=report.oa, kappa=report.kappa)
    return out


def run_one(proto: dict, data: SeedData, name: str) -> dict:
    cfg = run_config(proto, name, data.seed)
    start = time.perf_counter()
    model, history = fit_on_positions(cfg, data.train, data.train_pos)
    seconds = time.perf_counter() - start
    test = _score(model, data.test, data.test_pos)
    train = _score(model, data.train, data.train_eval_pos)
    rec = {"run": name, "seed": data.seed, "epochs": cfg.epochs, "train_seconds": seconds,
           "seconds": time.perf_counter() - start,
           "train_oa": train["oa"], "test_oa": test["oa"], "test_kappa": test["kappa"],
           "gap": train["oa"] - test["oa"]}
    for key in ("grid", "grid_center", "grid_corner_mean", "patch_oa"):
        if key in test:
            rec[key] = test[key]
    log.info("%s seed %d: train %.4f test %.4f (%.0fs)", name, data.seed, rec["train_oa"], rec["test_oa"], seconds)
    return rec


def summarize(records: list[dict]) -> dict:
    summary = {}
    for name in dict.fromkeys(r["run"] for r in records):
        rs = [r for r in records if r["run"] == name]
        s = {"seeds": len(rs)}
        for key in ("train_oa", "test_oa", "test_kappa", "gap", "grid_center", "grid_corner_mean", "train_seconds"):
            vals = [r[key] for r in rs if key in r]
            if vals:
                s[key] = median(vals)
        summary[name] = s
    return summary


def run_matrix(config=None, out: Optional[str] = None, runs: Optional[Iterable[str]] = None,
               protocol: Optional[dict] = None, progress=None) -> dict:
    """Run every configured run for every seed.

    Returns ``{"protocol", "records", "summary", "data_seconds", "seconds"}``;
    ``progress`` (if given) is called with each finished record.
    """
    proto = protocol if protocol is not None else load_protocol(config)
    names = list(runs if runs is not None else proto["runs"])
    for n in names:
        parse_run(n)
    start = time.perf_counter()
    records = []
    data_seconds = {}
    for seed in proto["seeds"]:
        data = SeedData(proto, seed)
        data_seconds[seed] = data.seconds
        for name in names:
            rec = run_one(proto, data, name)
            records.append(rec)
            if progress is not None:
                progress(rec)
    result = {"protocol": proto, "records": records, "summary": summarize(records),
              "data_seconds": data_seconds, "seconds": time.perf_counter() - start}
    if out is not None:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(json.dumps(result, indent=2))
    return result
