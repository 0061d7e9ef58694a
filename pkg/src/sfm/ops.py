"""Replicate-padded shifts, small convolutions and softmaxes with their adjoints."""

from __future__ import annotations

import numpy as np


def pad_edge(x: np.ndarray, r: int) -> np.ndarray:
    if r == 0:
        return x
    width = [(0, 0)] * (x.ndim - 2) + [(r, r), (r, r)]
    return np.pad(x, width, mode="edge")


def pad_edge_vjp(gp: np.ndarray, r: int) -> np.ndarray:
    """Adjoint of :func:`pad_edge`: fold the border back onto the edge pixels."""
    if r == 0:
        return gp
    g = gp.copy()
    g[..., r, :] += g[..., :r, :].sum(axis=-2)
    g[..., -r - 1, :] += g[..., -r:, :].sum(axis=-2)
    g = g[..., r:-r, :]
    g[..., :, r] += g[..., :, :r].sum(axis=-1)
    g[..., :, -r - 1] += g[..., :, -r:].sum(axis=-1)
    return g[..., :, r:-r].copy()


def shift(x: np.ndarray, p: int, q: int) -> np.ndarray:
    """``out[..., i, j] = x[..., clip(i + p), clip(j + q)]``."""
    h, w = x.shape[-2:]
    rows = np.clip(np.arange(h) + p, 0, h - 1)
    cols = np.clip(np.arange(w) + q, 0, w - 1)
    return x[..., rows[:, None], cols[None, :]]


def shift_vjp(g: np.ndarray, p: int, q: int) -> np.ndarray:
    h, w = g.shape[-2:]
    r = max(abs(p), abs(q))
    gp = np.zeros(g.shape[:-2] + (h + 2 * r, w + 2 * r))
    gp[..., r + p : r + p + h, r + q : r + q + w] = g
    return pad_edge_vjp(gp, r)


def offsets(k: int = 3, dilation: int = 1):
    """Row-major ``(p, q)`` offsets of a ``k x k`` window; the centre is index ``k*k // 2``."""
    half = k // 2
    return [(p * dilation, q * dilation) for p in range(-half, half + 1) for q in range(-half, half + 1)]


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, dilation: int = 1) -> np.ndarray:
    """Dilated ``k x k`` convolution (cross-correlation) with replicate padding.

    ``x`` is ``(Cin, H, W)``, ``weight`` is ``(Cout, Cin, k, k)``.
    """
    cout, cin, k, _ = weight.shape
    out = np.zeros((cout,) + x.shape[1:])
    for n, (p, q) in enumerate(offsets(k, dilation)):
        w = weight[:, :, n // k, n % k]
        out += np.tensordot(w, shift(x, p, q), axes=(1, 0))
    return out + bias[:, None, None]


def conv2d_vjp(x, weight, g, dilation: int = 1):
    """Returns ``(grad_x, grad_weight, grad_bias)`` for :func:`conv2d`."""
    cout, cin, k, _ = weight.shape
    gx = np.zeros_like(x)
    gw = np.zeros_like(weight)
    for n, (p, q) in enumerate(offsets(k, dilation)):
        xs = shift(x, p, q)
        gw[:, :, n // k, n % k] = np.tensordot(g, xs, axes=([1, 2], [1, 2]))
        gx += shift_vjp(np.tensordot(weight[:, :, n // k, n % k], g, axes=(0, 0)), p, q)
    return gx, gw, g.sum(axis=(1, 2))


def softmax(z: np.ndarray, axis=None) -> np.ndarray:
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_vjp(s: np.ndarray, g: np.ndarray, axis=None) -> np.ndarray:
    """Adjoint of softmax given its output ``s``."""
    return s * (g - (g * s).sum(axis=axis, keepdims=True))
