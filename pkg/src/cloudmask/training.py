"""Binary cross-entropy, Adam, and the mini-batch training loop."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, TextIO

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .model import ModelSpec, ModelWeights, backward, forward, learned_names

log = logging.getLogger(__name__)

CLIP_EPS = 1e-12


def bce_loss(h: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy over every element, and its gradient w.r.t. ``h``.

    Predictions are clipped to [1e-12, 1 - 1e-12] so the loss stays finite;
    the gradient is that of the clipped expression.
    """
    h = np.asarray(h, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if h.shape != y.shape:
        raise ShapeError(f"prediction shape {h.shape} != target shape {y.shape}")
    hc = np.clip(h, CLIP_EPS, 1.0 - CLIP_EPS)
    count = h.size
    loss = -np.sum(y * np.log(hc) + (1.0 - y) * np.log1p(-hc)) / count
    grad = (hc - y) / (hc * (1.0 - hc)) / count
    return float(loss), grad


def patch_loss(h: np.ndarray, y: np.ndarray) -> float:
    if h.ndim != 2 or h.shape[1] != 81 or y.shape != h.shape:
        raise ShapeError(f"patch loss expects two (n, 81) arrays, got {h.shape} and {y.shape}")
    return bce_loss(h, y)[0]


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray], **hyper) -> "AdamState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()}, **hyper)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns new parameter and state objects."""
    t = state.t + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    new_params, new_m, new_v = dict(params), {}, {}
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m, v = np.zeros_like(p), np.zeros_like(p)
        elif m.shape != p.shape:
            raise ShapeError(f"Adam moments for {name} have shape {m.shape}, parameter has {p.shape}")
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        new_params[name] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
        new_m[name], new_v[name] = m, v
    for name in state.m:
        new_m.setdefault(name, state.m[name])
        new_v.setdefault(name, state.v[name])
    new_state = AdamState(state.lr, state.beta1, state.beta2, state.epsilon, t, new_m, new_v)
    return new_params, new_state


@dataclass
class TrainConfig:
    batch_size: int = 128
    epochs: int = 30
    lr: float = 1e-3
    seed: int = 0
    augment: bool = False
    output_mode: str = "pixel"
    shuffle: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        # lr == 0 is accepted as a null step
        if not self.lr >= 0:
            raise ConfigError("lr must be >= 0")
        if self.output_mode not in ("pixel", "patch9"):
            raise ConfigError(f"output_mode must be pixel or patch9, got {self.output_mode!r}")


def _flat_targets(y: np.ndarray, units: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    return y.reshape(len(y), units)


def train(spec: ModelSpec, weights: ModelWeights, x: np.ndarray, y: np.ndarray, config: TrainConfig,
          history_stream: Optional[TextIO] = None,
          on_epoch: Optional[Callable[[dict], None]] = None) -> tuple[ModelWeights, list[dict]]:
    """Mini-batch Adam on the mean BCE.

    ``x`` holds inputs (any float dtype; batches are promoted to float64)
    and ``y`` the 0/1 targets, shaped (n,) for one output unit or
    (n, 9, 9) / (n, 81) for patch targets. Augmentation is the caller's
    job (see ``data.augment_flips``). Returns the trained weights and one
    history record per epoch.
    """
    n = len(x)
    if n == 0:
        raise DataError("empty training set")
    if len(y) != n:
        raise DataError(f"{n} inputs but {len(y)} targets")
    units = spec.output_units
    if np.asarray(y[0]).size != units:
        raise DataError(f"targets have {np.asarray(y[0]).size} values per sample, model emits {units}")
    rng = np.random.default_rng(config.seed)
    weights = weights.copy()
    names = learned_names(spec)
    params = {k: weights.tensors[k] for k in names}
    state = AdamState.for_params(params, lr=config.lr)
    history = []
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        order = rng.permutation(n) if config.shuffle else np.arange(n)
        loss_sum = 0.0
        correct = 0
        for b0 in range(0, n, config.batch_size):
            idx = order[b0:b0 + config.batch_size]
            xb = np.asarray(x[idx], dtype=np.float64)
            yb = _flat_targets(y[idx], units)
            pred, caches = forward(spec, weights, xb, training=True, rng=rng)
            loss, grad = bce_loss(pred, yb)
            grads = backward(spec, caches, grad)
            params, state = adam_step(params, {k: grads[k] for k in names}, state)
            weights.tensors.update(params)
            loss_sum += loss * pred.size
            correct += int(np.sum((pred >= 0.5) == (yb >= 0.5)))
        record = {"epoch": epoch, "train_loss": loss_sum / (n * units),
                  "train_oa": correct / (n * units), "seconds": time.perf_counter() - start}
        history.append(record)
        log.info("epoch %d loss %.5f oa %.4f (%.1fs)", epoch, record["train_loss"], record["train_oa"],
                 record["seconds"])
        if history_stream is not None:
            history_stream.write(json.dumps(record) + "\n")
            history_stream.flush()
        if on_epoch is not None:
            on_epoch(record)
    return weights, history
