"""Minimal convolutional network primitives with explicit gradients.

Everything here is numpy, dtype-generic (float32 for training, float64 for
finite-difference gradient checks), and deterministic given the caller's
generator. Convolutions are stride-1 with same padding and run as im2col +
GEMM; the 2x2 stride-2 transpose convolution scatters non-overlapping
blocks, so it reduces to a tensordot and a reshape.

Gradient conventions: each backward takes d(out) and the forward cache and
returns (d(in), param grads). Shapes are (N, C, H, W) throughout.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(N, C, H, W) -> (N*H*W, C*kh*kw) patches under same padding."""
    n, c, h, w = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    # (N, C, H, W, kh, kw) -> (N, H, W, C, kh, kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * kh * kw)
    return np.ascontiguousarray(cols)


def _col2im(dcols: np.ndarray, shape, kh: int, kw: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patch gradients back onto the grid."""
    n, c, h, w = shape
    ph, pw = kh // 2, kw // 2
    dxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=dcols.dtype)
    d6 = dcols.reshape(n, h, w, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    for a in range(kh):
        for b in range(kw):
            dxp[:, :, a : a + h, b : b + w] += d6[:, :, :, :, a, b]
    return dxp[:, :, ph : ph + h, pw : pw + w] if (ph or pw) else dxp


def conv2d(x, w, b):
    """Same-padding stride-1 convolution. w: (K, C, kh, kw)."""
    n, c, h, width = x.shape
    k, cw, kh, kw = w.shape
    if cw != c:
        raise ShapeError(f"conv expects {cw} input channels, got {c}")
    cols = _im2col(x, kh, kw)
    out = cols @ w.reshape(k, -1).T + b
    out = out.reshape(n, h, width, k).transpose(0, 3, 1, 2)
    return out, (cols, x.shape, w)


def conv2d_backward(dout, cache):
    cols, x_shape, w = cache
    n, c, h, width = x_shape
    k = w.shape[0]
    dmat = dout.transpose(0, 2, 3, 1).reshape(n * h * width, k)
    dw = (dmat.T @ cols).reshape(w.shape)
    db = dmat.sum(axis=0)
    dcols = dmat @ w.reshape(k, -1)
    dx = _col2im(dcols, x_shape, w.shape[2], w.shape[3])
    return dx, dw, db


def conv_transpose2x2(x, w, b):
    """Stride-2 2x2 transpose convolution (doubles H and W). w: (C, K, 2, 2)."""
    n, c, h, width = x.shape
    if w.shape[0] != c:
        raise ShapeError(f"transpose conv expects {w.shape[0]} channels, got {c}")
    k = w.shape[1]
    # (N, C, H, W) x (C, K, 2, 2) -> (N, H, W, K, 2, 2)
    out = np.tensordot(x.transpose(0, 2, 3, 1), w, axes=([3], [0]))
    out = out.transpose(0, 3, 1, 4, 2, 5).reshape(n, k, 2 * h, 2 * width)
    return out + b.reshape(1, k, 1, 1), (x, w)


def conv_transpose2x2_backward(dout, cache):
    x, w = cache
    n, c, h, width = x.shape
    k = w.shape[1]
    d6 = dout.reshape(n, k, h, 2, width, 2).transpose(0, 2, 4, 1, 3, 5)
    # dx: contract over (K, 2, 2)
    dx = np.tensordot(d6, w, axes=([3, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    # dw: contract over (N, H, W)
    dw = np.tensordot(x, d6, axes=([0, 2, 3], [0, 1, 2]))
    db = dout.sum(axis=(0, 2, 3))
    return np.ascontiguousarray(dx), dw, db


def maxpool2(x):
    """2x2 stride-2 max pooling; first-maximum tie-break."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool needs even spatial dims, got {h}x{w}")
    xr = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = xr.reshape(n, c, h // 2, w // 2, 4)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape)


def maxpool2_backward(dout, cache):
    idx, x_shape = cache
    n, c, h, w = x_shape
    dflat = np.zeros((n, c, h // 2, w // 2, 4), dtype=dout.dtype)
    np.put_along_axis(dflat, idx[..., None], dout[..., None], axis=-1)
    dx = dflat.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return dx.reshape(x_shape)


def relu(x):
    out = np.maximum(x, 0)
    return out, x > 0


def relu_backward(dout, mask):
    return dout * mask


def spatial_dropout(x, rate: float, rng: np.random.Generator):
    """Zero whole channels per sample (inverted dropout)."""
    keep = rng.random((x.shape[0], x.shape[1], 1, 1)) >= rate
    scale = np.asarray(1.0 / (1.0 - rate), dtype=x.dtype)
    mask = keep.astype(x.dtype) * scale
    return x * mask, mask


def spatial_dropout_backward(dout, mask):
    return dout * mask


def sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid_backward(dprob, prob):
    return dprob * prob * (1.0 - prob)


def softmax_channels(z):
    """Per-pixel softmax across the channel axis."""
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(dprob, prob):
    inner = (dprob * prob).sum(axis=1, keepdims=True)
    return prob * (dprob - inner)


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32):
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype)


class Adam:
    """Standard Adam with bias correction; state keyed like the params."""

    def __init__(self, params: dict, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict, lr_scale: float = 1.0) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        lr = self.lr * lr_scale
        for k, g in grads.items():
            m = self.m[k]
            v = self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * np.square(g)
            params[k] -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
