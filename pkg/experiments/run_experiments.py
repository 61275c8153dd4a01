"""Reproduce the experiment matrix on synthetic scenes.

    python experiments/run_experiments.py                      # full matrix, desk protocol
    python experiments/run_experiments.py --runs mlp-all,cloudnet17-pixel --seeds 0

Writes results.json (every record plus per-run medians) and results.md
(the three tables) next to this script unless --out is given.
"""

import argparse
import json
import logging
from pathlib import Path

from cloudmask.experiments import load_protocol, run_matrix
from cloudmask.inference import thread_limit

HERE = Path(__file__).resolve().parent

TABLES = {
    "Input configurations (baselines)": ["mlp-bands", "mlp-feat", "mlp-all", "gbm-bands", "gbm-feat", "gbm-all"],
    "Augmentation": ["cloudnet17-pixel", "cloudnet17-pixel-aug", "cloudnet33-pixel", "cloudnet33-pixel-aug"],
    "Network variants": ["cloudnet17-pixel", "cloudnet33-pixel", "cloudnet17-patch9", "cloudnet33-patch9"],
}


def markdown(summary: dict) -> str:
    out = []
    for title, runs in TABLES.items():
        rows = [r for r in runs if r in summary]
        if not rows:
            continue
        out += [f"## {title}", "", "| run | train OA | test OA | kappa | gap (pts) | grid center | grid corners |",
                "|---|---|---|---|---|---|---|"]
        for r in rows:
            s = summary[r]
            grid = (f"{s['grid_center']:.4f} | {s['grid_corner_mean']:.4f}" if "grid_center" in s else "- | -")
            out.append(f"| {r} | {s['train_oa']:.4f} | {s['test_oa']:.4f} | {s['test_kappa']:.4f} | "
                       f"{100 * s['gap']:+.2f} | {grid} |")
        out.append("")
    return "\n".join(out)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--protocol", default=str(HERE / "protocol.json"))
    p.add_argument("--runs", default=None, help="comma-separated run names (default: protocol's list)")
    p.add_argument("--seeds", default=None, help="comma-separated seeds (default: protocol's list)")
    p.add_argument("--out", default=str(HERE / "results.json"))
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    proto = load_protocol(args.protocol)
    if args.seeds:
        proto["seeds"] = [int(s) for s in args.seeds.split(",")]
    runs = args.runs.split(",") if args.runs else None
    with thread_limit(1):
        result = run_matrix(protocol=proto, runs=runs, out=args.out)
    table = markdown(result["summary"])
    Path(args.out).with_suffix(".md").write_text(table)
    print(table)
    print(f"total {result['seconds'] / 60:.1f} min")


if __name__ == "__main__":
    main()
