"""Dense (n, c, h, w) float64 tensors and the im2col/col2im kernels.

Tensors are plain ``numpy.ndarray`` objects of rank 4 and dtype float64 in
C order, which is exactly the n-major, then c, then h, then w layout.
"""

from __future__ import annotations

from typing import Callable, Sequence, Union

import numpy as np

from .errors import ShapeError

Scalar = Union[int, float]

_BINARY = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}


def _check_finite(t: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(t)):
        raise FloatingPointError("tensor operation produced non-finite values")
    return t


def tensor_create(shape: Sequence[int], fill: Union[Scalar, Sequence[float], np.ndarray] = 0.0) -> np.ndarray:
    """Build a 4-D float64 tensor filled with a scalar or a flat sequence."""
    shape = tuple(int(s) for s in shape)
    if len(shape) != 4:
        raise ShapeError(f"expected a 4-tuple shape, got {shape}")
    if any(s < 1 for s in shape):
        raise ShapeError(f"all dimensions must be >= 1, got {shape}")
    size = int(np.prod(shape))
    if np.isscalar(fill):
        out = np.full(shape, float(fill), dtype=np.float64)
    else:
        flat = np.asarray(fill, dtype=np.float64).ravel()
        if flat.size != size:
            raise ShapeError(f"sequence length {flat.size} does not match shape {shape} ({size} elements)")
        out = flat.reshape(shape).copy()
    return _check_finite(out)


def elementwise(op: str, a: np.ndarray, b: Union[np.ndarray, Scalar, Callable, None] = None) -> np.ndarray:
    """Apply ``add``, ``sub``, ``mul``, ``scale`` or ``map`` per element.

    Binary ops take a tensor of identical shape or a scalar; ``scale``
    takes a scalar and ``map`` takes a unary callable. Inputs are never
    modified.
    """
    if op == "map":
        if not callable(b):
            raise TypeError("map requires a callable")
        out = np.asarray(b(a.copy()), dtype=np.float64)
        if out.shape != a.shape:
            raise ShapeError("mapped function changed the tensor shape")
        return _check_finite(out)
    if op == "scale":
        if not np.isscalar(b):
            raise TypeError("scale requires a scalar")
        return _check_finite(a * float(b))
    if op not in _BINARY:
        raise ValueError(f"unknown elementwise op {op!r}")
    if not np.isscalar(b):
        b = np.asarray(b)
        if b.shape != a.shape:
            raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return _check_finite(_BINARY[op](a, b).astype(np.float64, copy=False))


def conv_output_size(size: int, k: int, pad: int, stride: int) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise ShapeError(f"non-integral output size for input {size}, kernel {k}, pad {pad}, stride {stride}")
    return span // stride + 1


def im2col(x: np.ndarray, kernel: tuple[int, int], pad: int = 0, stride: int = 1) -> np.ndarray:
    """Unroll receptive fields into a (c*kh*kw, n*out_h*out_w) matrix.

    Row index is ``(c*kh + u)*kw + v``; column index is
    ``(n*out_h + i)*out_w + j``; padded positions read zero.
    """
    n, c, h, w = x.shape
    kh, kw = kernel
    oh = conv_output_size(h, kh, pad, stride)
    ow = conv_output_size(w, kw, pad, stride)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((c, kh, kw, n, oh, ow), dtype=np.float64)
    for u in range(kh):
        for v in range(kw):
            window = xp[:, :, u:u + stride * oh:stride, v:v + stride * ow:stride]
            cols[:, u, v] = window.transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * oh * ow)


def col2im(cols: np.ndarray, x_shape: tuple[int, int, int, int], kernel: tuple[int, int],
           pad: int = 0, stride: int = 1) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add columns back onto the input grid."""
    n, c, h, w = x_shape
    kh, kw = kernel
    oh = conv_output_size(h, kh, pad, stride)
    ow = conv_output_size(w, kw, pad, stride)
    cols = cols.reshape(c, kh, kw, n, oh, ow)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    for u in range(kh):
        for v in range(kw):
            xp[:, :, u:u + stride * oh:stride, v:v + stride * ow:stride] += cols[:, u, v].transpose(1, 0, 2, 3)
    if pad:
        return xp[:, :, pad:pad + h, pad:pad + w]
    return xp
