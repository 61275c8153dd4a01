"""Slow, obviously-correct reference implementations used only by tests."""

import numpy as np


def conv2d_loops(x, w, b, pad, stride=1):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    y = np.zeros((n, o, oh, ow))
    for ni in range(n):
        for oi in range(o):
            for i in range(oh):
                for j in range(ow):
                    acc = b[oi]
                    for ci in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += w[oi, ci, u, v] * xp[ni, ci, i * stride + u, j * stride + v]
                    y[ni, oi, i, j] = acc
    return y


def im2col_sliding(x, kh, kw, pad, stride=1):
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + w] = x
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    cols = np.zeros((c * kh * kw, n * oh * ow))
    for ni in range(n):
        for i in range(oh):
            for j in range(ow):
                col = (ni * oh + i) * ow + j
                cols[:, col] = xp[ni, :, i * stride:i * stride + kh, j * stride:j * stride + kw].ravel()
    return cols


def central_difference(f, x, step=1e-5):
    """Gradient of scalar ``f`` at array ``x`` (perturbed in place, restored)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + step
        fp = f()
        x[idx] = orig - step
        fm = f()
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * step)
    return grad


def confusion_loop(pred, truth):
    tn = fp = fn = tp = 0
    for p, t in zip(pred, truth):
        if p and t:
            tp += 1
        elif p and not t:
            fp += 1
        elif not p and t:
            fn += 1
        else:
            tn += 1
    n = tn + fp + fn + tp
    po = (tp + tn) / n
    p_yes = ((tp + fp) / n) * ((tp + fn) / n)
    p_no = ((tn + fn) / n) * ((tn + fp) / n)
    pe = p_yes + p_no
    kappa = 0.0 if pe == 1 else (po - pe) / (1 - pe)
    return (tn, fp, fn, tp), po, kappa
