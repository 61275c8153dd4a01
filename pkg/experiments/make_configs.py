"""Write one ``cloudmask train`` config per cell of the matrix into configs/.

The configs read scenes made by
``cloudmask synth --count 4 --seed 0 --out experiments/data/train.mspc``
and mirror the library protocol in protocol.json (seed 0).
"""

import json
from pathlib import Path

from cloudmask.experiments import DEFAULT_PROTOCOL, run_config

HERE = Path(__file__).resolve().parent


def main():
    proto = json.loads((HERE / "protocol.json").read_text())
    proto = {**DEFAULT_PROTOCOL, **proto}
    train = [f"../data/train_{i:03d}.mspc" for i in range(proto["train_scenes"])]
    for name in proto["runs"]:
        cfg = run_config(proto, name, seed=0).to_dict()
        cfg.update(train=train, model_out=f"../models/{name}", footprint=33)
        if cfg["model"] in ("mlp", "gbm"):
            for key in ("widths", "hidden", "output_mode", "augment"):
                cfg.pop(key)
            if cfg["model"] == "gbm":
                for key in ("batch_size", "epochs", "lr", "mlp_hidden"):
                    cfg.pop(key)
            else:
                cfg.pop("gbm")
        else:
            for key in ("input_config", "mlp_hidden", "gbm"):
                cfg.pop(key)
        for key in ("schema", "history_out"):
            cfg.pop(key)
        (HERE / "configs" / f"{name}.json").write_text(json.dumps(cfg, indent=2) + "\n")


if __name__ == "__main__":
    main()
