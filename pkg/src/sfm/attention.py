"""Attention generation: difference-aware convolution, pyramid pooling and a
spatial softmax producing a non-negative map that sums to one."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from . import ops
from .errors import ConfigError, DomainError
from .tensor import as_feature_map

PSP_BINS = (1, 2, 3, 7)
LAPLACIAN_KERNEL = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


def kernel_softmax(raw) -> np.ndarray:
    """Softmax over all entries of a ``k x k`` block (or each block of a stack)."""
    raw = np.asarray(raw, dtype=np.float64)
    flat = raw.reshape(raw.shape[:-2] + (-1,))
    return ops.softmax(flat, axis=-1).reshape(raw.shape)


def kernel_softmax_vjp(weights, g) -> np.ndarray:
    flat_w = weights.reshape(weights.shape[:-2] + (-1,))
    flat_g = np.asarray(g).reshape(flat_w.shape)
    return ops.softmax_vjp(flat_w, flat_g, axis=-1).reshape(weights.shape)


def _check_kernel(weights: np.ndarray, channels: int) -> int:
    if weights.ndim != 3 or weights.shape[1] != weights.shape[2]:
        raise ConfigError(f"DAConv weights must be (C, k, k), got {weights.shape}")
    k = weights.shape[1]
    if k % 2 == 0:
        raise ConfigError(f"DAConv kernel extent must be odd, got {k}")
    if weights.shape[0] != channels:
        raise ConfigError(f"DAConv has {weights.shape[0]} kernels for {channels} channels")
    return k


def daconv(fmap, weights) -> np.ndarray:
    """Central-minus-surrounding weighted differences, one kernel per channel.

    ``out = W_00 * x + sum_{n != 0} W_n * (x - x_n)`` with replicate padding;
    ``weights`` is ``(C, k, k)`` and is used as given (apply
    :func:`kernel_softmax` first for the normalized form).
    """
    x = as_feature_map(fmap)
    w = np.asarray(weights, dtype=np.float64)
    k = _check_kernel(w, x.shape[0])
    centre = (k * k) // 2
    out = np.zeros_like(x)
    for n, (p, q) in enumerate(ops.offsets(k)):
        wn = w[:, n // k, n % k][:, None, None]
        out += wn * x if n == centre else wn * (x - ops.shift(x, p, q))
    return out


def daconv_vjp(fmap, weights, g):
    """Returns ``(grad_x, grad_weights)`` for :func:`daconv`."""
    x = as_feature_map(fmap)
    w = np.asarray(weights, dtype=np.float64)
    k = _check_kernel(w, x.shape[0])
    centre = (k * k) // 2
    gx = g * w.reshape(w.shape[0], -1).sum(axis=1)[:, None, None]
    gw = np.zeros_like(w)
    for n, (p, q) in enumerate(ops.offsets(k)):
        if n == centre:
            gw[:, n // k, n % k] = (g * x).sum(axis=(1, 2))
            continue
        gw[:, n // k, n % k] = (g * (x - ops.shift(x, p, q))).sum(axis=(1, 2))
        gx -= ops.shift_vjp(g * w[:, n // k, n % k][:, None, None], p, q)
    return gx, gw


def laplacian(grid) -> np.ndarray:
    """3x3 Laplacian ``[[0,1,0],[1,-4,1],[0,1,0]]`` with replicate padding.

    Works on ``(H, W)`` or ``(C, H, W)`` arrays.
    """
    x = np.asarray(grid, dtype=np.float64)
    return (
        ops.shift(x, -1, 0) + ops.shift(x, 1, 0) + ops.shift(x, 0, -1) + ops.shift(x, 0, 1) - 4.0 * x
    )


def laplacian_vjp(g) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    return (
        ops.shift_vjp(g, -1, 0) + ops.shift_vjp(g, 1, 0) + ops.shift_vjp(g, 0, -1)
        + ops.shift_vjp(g, 0, 1) - 4.0 * g
    )


# -- pyramid pooling ---------------------------------------------------------


def adaptive_pool_matrix(n: int, bins: int) -> np.ndarray:
    """``(bins, n)`` averaging matrix; bin ``b`` spans ``[floor(b n / bins), ceil((b+1) n / bins))``."""
    m = np.zeros((bins, n))
    for b in range(bins):
        lo = (b * n) // bins
        hi = -((-(b + 1) * n) // bins)
        m[b, lo:hi] = 1.0 / (hi - lo)
    return m


def upsample_matrix(n: int, bins: int) -> np.ndarray:
    """``(n, bins)`` linear interpolation with aligned end points."""
    if bins == 1:
        return np.ones((n, 1))
    pos = np.arange(n) * (bins - 1) / (n - 1)
    lo = np.clip(np.floor(pos).astype(int), 0, bins - 2)
    frac = pos - lo
    m = np.zeros((n, bins))
    m[np.arange(n), lo] = 1 - frac
    m[np.arange(n), lo + 1] += frac
    return m


def _psp_operators(h: int, w: int, bins):
    return [
        (upsample_matrix(h, b) @ adaptive_pool_matrix(h, b), upsample_matrix(w, b) @ adaptive_pool_matrix(w, b))
        for b in bins
    ]


def psp_pool(fmap, bins=PSP_BINS) -> np.ndarray:
    """Average-pool to ``b x b`` and upsample back, for every bin size.

    Output channels are ordered bin-major: ``[bin0 (C), bin1 (C), ...]``.
    """
    x = as_feature_map(fmap)
    _, h, w = x.shape
    if min(h, w) < max(bins):
        raise ConfigError(f"pyramid pooling needs H, W >= {max(bins)}, got {h}x{w}")
    return np.concatenate([rows @ x @ cols.T for rows, cols in _psp_operators(h, w, bins)])


def psp_pool_vjp(g, shape, bins=PSP_BINS) -> np.ndarray:
    c, h, w = shape
    gx = np.zeros(shape)
    for n, (rows, cols) in enumerate(_psp_operators(h, w, bins)):
        gx += rows.T @ g[n * c : (n + 1) * c] @ cols
    return gx


# -- the generator -----------------------------------------------------------


@dataclass
class AttentionParams:
    """Weights of the attention generator.

    ``daconv_raw`` holds one unnormalized ``k x k`` kernel per input channel;
    ``proj`` maps the ``5C`` concatenated channels to a single logit. With
    ``generator="laplacian"`` a fixed Laplacian replaces the DAConv branch.
    """

    daconv_raw: np.ndarray
    proj: np.ndarray
    bias: float = 0.0
    generator: str = "daconv"
    bins: tuple = PSP_BINS

    @classmethod
    def zeros(cls, channels: int, kernel: int = 3, generator: str = "daconv"):
        return cls(
            daconv_raw=np.zeros((channels, kernel, kernel)),
            proj=np.zeros((1 + len(PSP_BINS)) * channels),
            generator=generator,
        )

    def copy(self, **changes):
        base = replace(self, daconv_raw=self.daconv_raw.copy(), proj=self.proj.copy())
        return replace(base, **changes) if changes else base


@dataclass
class AttentionTrace:
    """Intermediates kept by :func:`attention_forward` for the backward pass."""

    x: np.ndarray
    weights: np.ndarray
    features: np.ndarray
    logits: np.ndarray
    attention: np.ndarray
    extra: dict = field(default_factory=dict)


def spatial_softmax(logits) -> np.ndarray:
    """Joint softmax over all ``H * W`` positions."""
    return ops.softmax(np.asarray(logits, dtype=np.float64), axis=None)


def attention_forward(fmap, params: AttentionParams) -> AttentionTrace:
    x = as_feature_map(fmap)
    if params.generator == "daconv":
        weights = kernel_softmax(params.daconv_raw)
        local = daconv(x, weights)
    elif params.generator == "laplacian":
        weights = np.zeros((0,))
        local = laplacian(x)
    else:
        raise ConfigError(f"unknown attention generator {params.generator!r}")
    features = np.concatenate([local, psp_pool(x, params.bins)])
    if params.proj.shape != (features.shape[0],):
        raise ConfigError(f"projection needs {features.shape[0]} weights, got {params.proj.shape}")
    logits = np.tensordot(params.proj, features, axes=(0, 0)) + params.bias
    return AttentionTrace(x, weights, features, logits, spatial_softmax(logits))


def generate_attention(fmap, params: AttentionParams) -> np.ndarray:
    """``softmax_HW(conv1x1(concat[DAConv(x), PSP(x)]))`` as an ``(H, W)`` map."""
    return attention_forward(fmap, params).attention


def attention_vjp(trace: AttentionTrace, params: AttentionParams, g_attention):
    """Backward pass of :func:`attention_forward`.

    Returns ``(grads, grad_x)`` with ``grads`` keyed like the
    :class:`AttentionParams` fields.
    """
    g_logits = ops.softmax_vjp(trace.attention, np.asarray(g_attention, dtype=np.float64))
    g_proj = np.tensordot(trace.features, g_logits, axes=([1, 2], [0, 1]))
    g_feat = params.proj[:, None, None] * g_logits[None]
    c = trace.x.shape[0]
    g_local, g_psp = g_feat[:c], g_feat[c:]
    grad_x = psp_pool_vjp(g_psp, trace.x.shape, params.bins)
    grads = {"proj": g_proj, "bias": float(g_logits.sum())}
    if params.generator == "daconv":
        gx, gw = daconv_vjp(trace.x, trace.weights, g_local)
        grad_x += gx
        grads["daconv_raw"] = kernel_softmax_vjp(trace.weights, gw)
    else:
        grad_x += laplacian_vjp(g_local)
        grads["daconv_raw"] = np.zeros_like(params.daconv_raw)
    return grads, grad_x


def edge_attention(fmap, blur_sigma: float = 1.0, floor: float = 0.05) -> np.ndarray:
    """Handcrafted attention from rectified, blurred Laplacian magnitude.

    The channel-mean of ``|Laplacian|`` is Gaussian-blurred, scaled to a peak
    of one, lifted by ``floor`` and normalized to sum to one. Flat inputs
    give uniform attention.
    """
    x = np.asarray(fmap, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise DomainError(f"expected a 2-D or 3-D array, got {x.shape}")
    if floor <= 0:
        raise ConfigError("attention floor must be positive")
    edges = np.abs(laplacian(x)).mean(axis=0)
    if blur_sigma > 0:
        edges = ndimage.gaussian_filter(edges, blur_sigma, mode="nearest")
    peak = edges.max()
    a = (edges / peak if peak > 0 else np.zeros_like(edges)) + floor
    return a / a.sum()
