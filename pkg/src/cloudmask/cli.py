"""``cloudmask`` command-line tool.

Exit codes: 0 success, 1 unexpected failure (e.g. a failed gradient
check), 2 config error, 3 data error, 4 format error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import Raster, load_raster, save_raster
from .errors import CloudMaskError, ConfigError, DataError
from .evaluation import classify, masked_metrics, position_grid
from .inference import bench_inference, load_classifier, predict_raster, thread_limit
from .pipeline import RunConfig, fit
from .synth import DEFAULT_CLOUD_FRACTION, DEFAULT_NOISE, synth_scene

log = logging.getLogger("cloudmask")
MASK_NODATA = 255


def _synth_paths(out: str, count: int) -> list[Path]:
    out = Path(out)
    if count == 1:
        return [out]
    return [out.with_name(f"{out.stem}_{i:03d}{out.suffix}") for i in range(count)]


def cmd_synth(args) -> int:
    if args.count < 1:
        raise ConfigError("--count must be >= 1")
    for i, path in enumerate(_synth_paths(args.out, args.count)):
        r = synth_scene(args.width, args.height, args.seed + i, args.cloud_fraction, args.noise)
        path.parent.mkdir(parents=True, exist_ok=True)
        try:
            save_raster(r, path)
        except OSError as exc:
            raise DataError(f"cannot write {path}: {exc}") from exc
        print(f"{path}: cloud fraction {float(r.labels.mean()):.4f}")
    return 0


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    if not cfg.train:
        raise ConfigError("train: need at least one training raster")
    if not cfg.model_out:
        raise ConfigError("model_out: missing output path")
    rasters = [load_raster(p) for p in cfg.train]
    history_path = Path(cfg.history_out or cfg.model_out + ".history.jsonl")
    history_path.parent.mkdir(parents=True, exist_ok=True)
    with thread_limit(args.threads), history_path.open("w") as stream:
        model, history = fit(cfg, rasters, history_stream=stream)
    Path(cfg.model_out).parent.mkdir(parents=True, exist_ok=True)
    model.save(cfg.model_out)
    last = history[-1]
    print(json.dumps({"model": cfg.model_out, "history": str(history_path), **last}))
    return 0


def cmd_predict(args) -> int:
    model = load_classifier(args.model)
    raster = load_raster(args.input)
    if args.stride < 1:
        raise ConfigError("--stride must be >= 1")
    with thread_limit(args.threads):
        prob = predict_raster(raster, model, args.mode, args.stride)
    covered = ~np.isnan(prob)
    mask = np.full(prob.shape, MASK_NODATA, np.uint8)
    mask[covered] = classify(prob[covered])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_raster(Raster(np.nan_to_num(prob, nan=0.0)[None].astype(np.float32), mask), out)
    mask_path = Path(args.mask_out) if args.mask_out else out.with_name(out.stem + "_mask" + out.suffix)
    save_raster(Raster(mask[None].astype(np.float32), mask), mask_path)
    print(json.dumps({"probability": str(out), "mask": str(mask_path), "covered": int(covered.sum()),
                      "forward_passes": model.forward_samples}))
    return 0


def _mask_of(raster: Raster) -> np.ndarray:
    if raster.labels is not None:
        return raster.labels
    if raster.channels == 1:
        return raster.bands[0].astype(np.uint8)
    raise DataError("prediction raster has neither a label plane nor a single band")


def cmd_eval(args) -> int:
    pred = _mask_of(load_raster(args.pred))
    truth = load_raster(args.truth)
    if truth.labels is None:
        raise DataError(f"{args.truth} carries no labels")
    report = masked_metrics(pred, truth.labels)
    if args.grid:
        report.grid = _tiled_grid(pred, truth.labels)
    if args.out:
        report.save(args.out)
    print(json.dumps({"oa": report.oa, "kappa": report.kappa, "pixels": report.total}))
    return 0


def _tiled_grid(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Per-position accuracy over the fully covered 9x9 tiles of a mask."""
    h, w = pred.shape
    cells_p, cells_t = [], []
    for r in range(0, h - 8, 9):
        for c in range(0, w - 8, 9):
            p, t = pred[r:r + 9, c:c + 9], truth[r:r + 9, c:c + 9]
            if np.all(p != MASK_NODATA) and np.all(t != MASK_NODATA):
                cells_p.append(p)
                cells_t.append(t)
    if not cells_p:
        raise DataError("no fully covered 9x9 tile for the position grid")
    return position_grid(np.asarray(cells_p), np.asarray(cells_t))


def cmd_bench(args) -> int:
    model = load_classifier(args.model)
    stats = bench_inference(model, args.batches, args.batch_size, args.threads or 1, args.seed)
    print(json.dumps(stats))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite
    seeds = range(args.seed, args.seed + args.seeds)
    try:
        results = run_suite(args.layer, seeds)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    worst = {}
    for res in results:
        if res.name not in worst or res.max_error > worst[res.name].max_error:
            worst[res.name] = res
    failed = False
    for name, res in worst.items():
        status = "ok" if res.passed else "FAIL"
        failed |= not res.passed
        print(f"{name:12s} max rel error {res.max_error:.3e} (tol {res.tolerance:.0e}) {status}")
    return 1 if failed else 0


def cmd_experiments(args) -> int:
    from .experiments import run_matrix
    with thread_limit(args.threads):
        results = run_matrix(args.config, args.out)
    print(json.dumps(results["summary"], indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cloudmask", description="Patch-based CNN cloud masking on 4-band rasters.")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--threads", type=int, default=None,
                   help="BLAS threads (default: library default; >1 breaks bit-determinism)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write synthetic labeled scenes")
    s.add_argument("--width", type=int, default=256)
    s.add_argument("--height", type=int, default=256)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--cloud-fraction", type=float, default=DEFAULT_CLOUD_FRACTION)
    s.add_argument("--noise", type=float, default=DEFAULT_NOISE)
    s.add_argument("--count", type=int, default=1, help="write COUNT scenes, seeds SEED..SEED+COUNT-1")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a model from a JSON run config")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="probability map and mask for a raster")
    s.add_argument("--model", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True, help="1-band probability raster (MSPC)")
    s.add_argument("--mask-out", default=None, help="mask raster (default: <out>_mask)")
    s.add_argument("--mode", choices=("pixel", "center", "mean", "tile"), default="pixel")
    s.add_argument("--stride", type=int, default=1)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("eval", help="compare a mask with labeled truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--grid", action="store_true", help="add the 9x9 per-position grid over tiles")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", help="time inference batches")
    s.add_argument("--model", required=True)
    s.add_argument("--batches", type=int, default=20)
    s.add_argument("--batch-size", type=int, default=128)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    s.add_argument("--layer", default="all", help="all, network, or a layer kind")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--seeds", type=int, default=10, help="number of consecutive seeds")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("experiments", help="run the experiment matrix")
    s.add_argument("--config", default=None, help="protocol JSON (default: built-in desk protocol)")
    s.add_argument("--out", default="experiments/results.json")
    s.set_defaults(func=cmd_experiments)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CloudMaskError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
