"""Batched float kernels and their gradients.

Layouts are NCHW for feature maps and NF for flat vectors. The engine uses
the forward kernels; the trainer uses both directions.
"""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def pad_hw(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def im2col(x: np.ndarray, k: int, stride: int, padding: int) -> tuple[np.ndarray, int, int]:
    """Unfold ``x`` into rows of receptive fields: (N*Ho*Wo, C*k*k)."""
    n, c = x.shape[:2]
    xp = pad_hw(x, padding)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return cols, ho, wo


def col2im(dcols: np.ndarray, x_shape, k: int, stride: int, padding: int, ho: int, wo: int) -> np.ndarray:
    n, c, h, w = x_shape
    d = dcols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += d[:, :, i, j]
    if padding:
        return dxp[:, :, padding:-padding, padding:-padding]
    return dxp


def conv2d(x, w, b, stride, padding):
    o, _, k, _ = w.shape
    n = x.shape[0]
    cols, ho, wo = im2col(x, k, stride, padding)
    y = cols @ w.reshape(o, -1).T
    if b is not None:
        y = y + b
    return y.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)


def conv2d_backward(dy, x, w, stride, padding, with_bias):
    o, _, k, _ = w.shape
    cols, ho, wo = im2col(x, k, stride, padding)
    dy2 = dy.transpose(0, 2, 3, 1).reshape(-1, o)
    dw = (dy2.T @ cols).reshape(w.shape)
    db = dy2.sum(axis=0) if with_bias else None
    dx = col2im(dy2 @ w.reshape(o, -1), x.shape, k, stride, padding, ho, wo)
    return dx, dw, db


def linear(x, w, b):
    y = x @ w.T
    return y + b if b is not None else y


def linear_backward(dy, x, w, with_bias):
    return dy @ w, dy.T @ x, (dy.sum(axis=0) if with_bias else None)


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(dy, x):
    return dy * (x > 0)


def maxpool2d(x, k, stride):
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return win.max(axis=(4, 5))


def maxpool2d_backward(dy, x, k, stride):
    n, c, ho, wo = dy.shape
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)  # first maximum wins ties
    dx = np.zeros_like(x)
    for i in range(k):
        for j in range(k):
            sel = (arg == i * k + j) * dy
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += sel
    return dx


def adaptive_bins(size: int, out: int) -> list[tuple[int, int]]:
    return [((i * size) // out, math.ceil((i + 1) * size / out)) for i in range(out)]


def adaptive_avgpool2d(x, out):
    n, c, h, w = x.shape
    y = np.empty((n, c, out, out))
    for i, (h0, h1) in enumerate(adaptive_bins(h, out)):
        for j, (w0, w1) in enumerate(adaptive_bins(w, out)):
            y[:, :, i, j] = x[:, :, h0:h1, w0:w1].mean(axis=(2, 3))
    return y


def adaptive_avgpool2d_backward(dy, x_shape, out):
    n, c, h, w = x_shape
    dx = np.zeros(x_shape)
    for i, (h0, h1) in enumerate(adaptive_bins(h, out)):
        for j, (w0, w1) in enumerate(adaptive_bins(w, out)):
            area = (h1 - h0) * (w1 - w0)
            dx[:, :, h0:h1, w0:w1] += dy[:, :, i:i + 1, j:j + 1] / area
    return dx


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
