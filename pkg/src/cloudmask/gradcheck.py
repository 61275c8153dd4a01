"""Central finite-difference checks of every layer's backward pass and of a
small full cloudnet, as run by ``cloudmask gradcheck``."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Optional

import numpy as np

from . import layers as L
from .model import backward, build_cloudnet, forward, learned_names
from .training import bce_loss

LAYER_TOL = 1e-4
NETWORK_TOL = 1e-3
# below this sup-norm both gradients count as zero and are compared absolutely
ZERO_GRAD = 1e-7
# network checks: tensors whose gradient is this far below the largest one
# (e.g. conv biases feeding batchnorm, exactly zero) are scaled by that floor
NETWORK_FLOOR = 1e-3


@dataclass
class CheckResult:
    name: str
    seed: int
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = ZERO_GRAD) -> float:
    """Sup-norm error scaled by the larger of the two gradients' sup-norms (at least ``floor``)."""
    diff = float(np.max(np.abs(analytic - numeric))) if analytic.size else 0.0
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)))
    return diff / max(scale, floor)


def numeric_gradient(f: Callable[[], float], x: np.ndarray, step: float) -> np.ndarray:
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        g[i] = (fp - fm) / (2.0 * step)
    return grad


def _kink_free(rng, shape, low=0.05):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(low, 1.0, size=shape)


def _distinct(rng, shape, gap=1e-2):
    n = int(np.prod(shape))
    return (rng.permutation(n) * gap - n * gap / 2).reshape(shape)


def _layer_case(kind: str, rng: np.random.Generator):
    """Return (inputs dict, forward closure) where forward(inputs) -> (y, cache)."""
    if kind == "conv2d":
        inputs = {"x": rng.standard_normal((2, 3, 5, 5)), "weight": rng.standard_normal((4, 3, 3, 3)),
                  "bias": rng.standard_normal(4)}
        fwd = lambda p: L.conv2d_forward(p["x"], p["weight"], p["bias"], 1, 1)
    elif kind == "batchnorm2d":
        c = 3
        inputs = {"x": rng.standard_normal((4, c, 3, 3)) * 2 + 1, "gamma": rng.uniform(0.5, 1.5, c),
                  "beta": rng.standard_normal(c)}
        rm, rv = np.zeros(c), np.ones(c)
        fwd = lambda p: L.batchnorm2d_forward(p["x"], p["gamma"], p["beta"], rm, rv, True)
    elif kind == "relu":
        inputs = {"x": _kink_free(rng, (2, 3, 4, 4))}
        fwd = lambda p: L.activation_forward("relu", p["x"])
    elif kind == "sigmoid":
        inputs = {"x": rng.standard_normal((2, 3, 4, 4)) * 2}
        fwd = lambda p: L.activation_forward("sigmoid", p["x"])
    elif kind == "maxpool2x2":
        inputs = {"x": _distinct(rng, (2, 2, 5, 6))}
        fwd = lambda p: L.maxpool2x2_forward(p["x"])
    elif kind == "dense":
        inputs = {"x": rng.standard_normal((3, 5)), "weight": rng.standard_normal((4, 5)),
                  "bias": rng.standard_normal(4)}
        fwd = lambda p: L.dense_forward(p["x"], p["weight"], p["bias"])
    elif kind == "dropout":
        inputs = {"x": rng.standard_normal((2, 3, 4, 4))}
        mask_seed = int(rng.integers(2 ** 31))
        fwd = lambda p: L.dropout_forward(p["x"], 0.25, True, np.random.default_rng(mask_seed))
    elif kind == "flatten":
        inputs = {"x": rng.standard_normal((2, 3, 2, 2))}
        fwd = lambda p: L.flatten_forward(p["x"])
    else:
        raise ValueError(f"unknown layer kind {kind!r}")
    return inputs, fwd


def check_layer(kind: str, seed: int, step: float = 1e-5) -> CheckResult:
    rng = np.random.default_rng(seed)
    inputs, fwd = _layer_case(kind, rng)
    y, cache = fwd(inputs)
    proj = rng.standard_normal(y.shape)
    grad_in, grad_params = L.layer_backward(kind, cache, proj)
    analytic = {"x": grad_in, **grad_params}
    loss = lambda: float(np.sum(fwd(inputs)[0] * proj))
    worst = 0.0
    for name, value in inputs.items():
        numeric = numeric_gradient(loss, value, step)
        worst = max(worst, relative_error(analytic[name], numeric))
    return CheckResult(kind, seed, worst, LAYER_TOL)


def tiny_cloudnet(seed: int):
    """A narrow 17x17 cloudnet (same layer sequence, few filters) for end-to-end checks."""
    return build_cloudnet(17, "pixel", seed, widths=(2, 2, 3, 3), hidden=4)


def check_network(seed: int, step: float = 1e-5, batch: int = 2) -> CheckResult:
    """Full loss gradient w.r.t. every learned tensor of a tiny cloudnet17, batchnorm and dropout on."""
    spec, weights = tiny_cloudnet(seed)
    rng = np.random.default_rng(seed + 1)
    for name in learned_names(spec):
        if name.endswith(".bias") or name.endswith(".beta"):
            weights.tensors[name] = rng.standard_normal(weights[name].shape) * 0.1
    x = rng.uniform(0.0, 0.6, (batch, 4, 17, 17))
    y = rng.integers(0, 2, (batch, 1)).astype(np.float64)
    drop_seed = int(rng.integers(2 ** 31))

    def loss() -> float:
        pred, _ = forward(spec, weights, x, True, np.random.default_rng(drop_seed))
        return bce_loss(pred, y)[0]

    pred, caches = forward(spec, weights, x, True, np.random.default_rng(drop_seed))
    grads = backward(spec, caches, bce_loss(pred, y)[1])
    names = learned_names(spec)
    floor = max(ZERO_GRAD, NETWORK_FLOOR * max(float(np.max(np.abs(grads[n]))) for n in names))
    worst = 0.0
    for name in names:
        numeric = numeric_gradient(loss, weights.tensors[name], step)
        worst = max(worst, relative_error(grads[name], numeric, floor))
    return CheckResult("cloudnet17", seed, worst, NETWORK_TOL)


GRADCHECK_KINDS = ("conv2d", "batchnorm2d", "relu", "maxpool2x2", "dense", "dropout", "sigmoid", "flatten")


def run_suite(layer: str = "all", seeds: Iterable[int] = range(10), network: Optional[bool] = None) -> list[CheckResult]:
    seeds = list(seeds)
    if layer == "all":
        kinds = GRADCHECK_KINDS
        network = True if network is None else network
    elif layer in GRADCHECK_KINDS:
        kinds = (layer,)
    elif layer == "network":
        kinds = ()
        network = True
    else:
        raise ValueError(f"unknown layer {layer!r}")
    results = [check_layer(k, s) for k in kinds for s in seeds]
    if network:
        results += [check_network(s) for s in seeds]
    return results
