"""Forward and backward passes for the layer kinds used by the networks.

Every ``*_forward`` returns ``(y, cache)``; the cache is ``None`` when the
call ran in inference mode, and ``layer_backward`` refuses to run without
one. Caches are plain dicts tagged with the layer kind.
"""

from __future__ import annotations

from typing import Any, Optional

import numpy as np

from .errors import ShapeError
from .tensor import col2im, conv_output_size, im2col

KINDS = ("conv2d", "batchnorm2d", "relu", "maxpool2x2", "dense", "dropout", "sigmoid", "flatten")

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.9
# logits beyond this saturate the float64 sigmoid to exactly 0 or 1
_SIGMOID_CLIP = 36.0

Cache = Optional[dict[str, Any]]


def conv2d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, pad: int = 1, stride: int = 1,
                   training: bool = True) -> tuple[np.ndarray, Cache]:
    n, c, h, w = x.shape
    out_c, in_c, kh, kw = weight.shape
    if c != in_c:
        raise ShapeError(f"conv2d expects {in_c} input channels, got {c}")
    oh = conv_output_size(h, kh, pad, stride)
    ow = conv_output_size(w, kw, pad, stride)
    cols = im2col(x, (kh, kw), pad, stride)
    y = weight.reshape(out_c, -1) @ cols + bias[:, None]
    y = y.reshape(out_c, n, oh, ow).transpose(1, 0, 2, 3)
    y = np.ascontiguousarray(y)
    if not training:
        return y, None
    cache = {"kind": "conv2d", "x_shape": x.shape, "cols": cols, "weight": weight, "pad": pad, "stride": stride}
    return y, cache


def _conv2d_backward(cache: dict, dy: np.ndarray, need_input_grad: bool = True):
    weight = cache["weight"]
    out_c, _, kh, kw = weight.shape
    dy_mat = dy.transpose(1, 0, 2, 3).reshape(out_c, -1)
    dw = (dy_mat @ cache["cols"].T).reshape(weight.shape)
    db = dy_mat.sum(axis=1)
    if not need_input_grad:
        return None, {"weight": dw, "bias": db}
    dcols = weight.reshape(out_c, -1).T @ dy_mat
    dx = col2im(dcols, cache["x_shape"], (kh, kw), cache["pad"], cache["stride"])
    return dx, {"weight": dw, "bias": db}


def batchnorm2d_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, running_mean: np.ndarray,
                        running_var: np.ndarray, training: bool = True, eps: float = BN_EPSILON,
                        momentum: float = BN_MOMENTUM) -> tuple[np.ndarray, Cache]:
    """Per-channel batch normalization over (n, h, w).

    In training mode the batch statistics normalize the input and
    ``running_mean``/``running_var`` are updated in place with
    ``running = momentum*running + (1-momentum)*batch``.
    """
    n, c, h, w = x.shape
    if c != gamma.shape[0]:
        raise ShapeError(f"batchnorm expects {gamma.shape[0]} channels, got {c}")
    shape = (1, c, 1, 1)
    if not training:
        inv_std = 1.0 / np.sqrt(running_var + eps)
        y = (x - running_mean.reshape(shape)) * (gamma * inv_std).reshape(shape) + beta.reshape(shape)
        return y, None
    if n * h * w < 2:
        raise ShapeError("batchnorm in training mode needs at least 2 values per channel")
    mean = x.mean(axis=(0, 2, 3))
    centered = x - mean.reshape(shape)
    var = np.mean(centered * centered, axis=(0, 2, 3))
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std.reshape(shape)
    y = xhat * gamma.reshape(shape) + beta.reshape(shape)
    running_mean *= momentum
    running_mean += (1.0 - momentum) * mean
    running_var *= momentum
    running_var += (1.0 - momentum) * var
    return y, {"kind": "batchnorm2d", "xhat": xhat, "inv_std": inv_std, "gamma": gamma}


def _batchnorm2d_backward(cache: dict, dy: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    xhat, inv_std, gamma = cache["xhat"], cache["inv_std"], cache["gamma"]
    shape = (1, -1, 1, 1)
    m = dy.shape[0] * dy.shape[2] * dy.shape[3]
    dgamma = np.sum(dy * xhat, axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    dxhat = dy * gamma.reshape(shape)
    dx = (inv_std.reshape(shape) / m) * (
        m * dxhat
        - dxhat.sum(axis=(0, 2, 3)).reshape(shape)
        - xhat * np.sum(dxhat * xhat, axis=(0, 2, 3)).reshape(shape)
    )
    return dx, {"gamma": dgamma, "beta": dbeta}


def maxpool2x2_forward(x: np.ndarray, training: bool = True) -> tuple[np.ndarray, Cache]:
    """2x2 max pooling, stride 2; an odd trailing row/column is dropped."""
    n, c, h, w = x.shape
    if h < 2 or w < 2:
        raise ShapeError(f"maxpool2x2 needs spatial size >= 2, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    windows = x[:, :, :2 * h2, :2 * w2].reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5)
    windows = windows.reshape(n, c, h2, w2, 4)
    # np.argmax returns the first maximum, i.e. row-major tie breaking
    arg = windows.argmax(axis=-1)
    y = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]
    if not training:
        return y, None
    return y, {"kind": "maxpool2x2", "x_shape": x.shape, "argmax": arg}


def _maxpool2x2_backward(cache: dict, dy: np.ndarray) -> tuple[np.ndarray, dict]:
    n, c, h, w = cache["x_shape"]
    h2, w2 = h // 2, w // 2
    routed = np.zeros((n, c, h2, w2, 4), dtype=np.float64)
    np.put_along_axis(routed, cache["argmax"][..., None], dy[..., None], axis=-1)
    routed = routed.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
    dx = np.zeros((n, c, h, w), dtype=np.float64)
    dx[:, :, :2 * h2, :2 * w2] = routed
    return dx, {}


def dense_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray,
                  training: bool = True) -> tuple[np.ndarray, Cache]:
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"dense expects (n, {weight.shape[1]}) input, got {x.shape}")
    y = x @ weight.T + bias
    if not training:
        return y, None
    return y, {"kind": "dense", "x": x, "weight": weight}


def _dense_backward(cache: dict, dy: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    return dy @ cache["weight"], {"weight": dy.T @ cache["x"], "bias": dy.sum(axis=0)}


def sigmoid(x: np.ndarray) -> np.ndarray:
    z = np.clip(x, -_SIGMOID_CLIP, _SIGMOID_CLIP)
    return 1.0 / (1.0 + np.exp(-z))


def activation_forward(kind: str, x: np.ndarray, training: bool = True) -> tuple[np.ndarray, Cache]:
    if kind == "relu":
        y = np.maximum(x, 0.0)
        cache = {"kind": "relu", "mask": x > 0} if training else None
    elif kind == "sigmoid":
        y = sigmoid(x)
        cache = {"kind": "sigmoid", "y": y} if training else None
    else:
        raise ValueError(f"unknown activation {kind!r}")
    return y, cache


def dropout_forward(x: np.ndarray, drop_probability: float, training: bool,
                    rng: Optional[np.random.Generator]) -> tuple[np.ndarray, Cache]:
    """Inverted dropout: survivors are scaled by 1/(1-p) at train time."""
    if not 0.0 <= drop_probability < 1.0:
        raise ValueError(f"drop probability must be in [0, 1), got {drop_probability}")
    if not training:
        return x, None
    if drop_probability == 0.0:
        mask = np.ones_like(x)
    else:
        if rng is None:
            raise ValueError("training-mode dropout needs an rng")
        mask = (rng.random(x.shape) >= drop_probability) / (1.0 - drop_probability)
    return x * mask, {"kind": "dropout", "mask": mask}


def flatten_forward(x: np.ndarray, training: bool = True) -> tuple[np.ndarray, Cache]:
    y = x.reshape(x.shape[0], -1)
    return y, ({"kind": "flatten", "x_shape": x.shape} if training else None)


def layer_backward(kind: str, cache: Cache, grad_out: np.ndarray,
                   need_input_grad: bool = True) -> tuple[Optional[np.ndarray], dict[str, np.ndarray]]:
    """Return ``(grad_in, grad_params)`` for one layer given its forward cache.

    With ``need_input_grad=False`` a conv layer skips ``grad_in`` (returned
    as None); the network's first layer never needs it.
    """
    if cache is None:
        raise ValueError(f"no cache for {kind} backward; forward must run in training mode")
    if cache.get("kind") != kind:
        raise ValueError(f"cache from {cache.get('kind')!r} passed to {kind!r} backward")
    if kind == "conv2d":
        return _conv2d_backward(cache, grad_out, need_input_grad)
    if kind == "batchnorm2d":
        return _batchnorm2d_backward(cache, grad_out)
    if kind == "maxpool2x2":
        return _maxpool2x2_backward(cache, grad_out)
    if kind == "dense":
        return _dense_backward(cache, grad_out)
    if kind == "relu":
        return grad_out * cache["mask"], {}
    if kind == "sigmoid":
        y = cache["y"]
        return grad_out * y * (1.0 - y), {}
    if kind == "dropout":
        return grad_out * cache["mask"], {}
    if kind == "flatten":
        return grad_out.reshape(cache["x_shape"]), {}
    raise ValueError(f"unknown layer kind {kind!r}")
