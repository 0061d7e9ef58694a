"""Attention-driven coordinate mapping and non-uniform resampling.

Each output position takes the attention-and-Gaussian-weighted average of
its neighbours' source coordinates, so sampling concentrates where
attention is high. The attention map is reflect-padded by the kernel
radius while source coordinates extend linearly past the border, which
makes uniform attention reproduce the identity grid. Afterwards every
column of ``u`` and every row of ``v`` is affinely rescaled so the border
lands exactly on 0 and 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DomainError
from .tensor import as_feature_map, sample_bilinear, sample_bilinear_vjp


@dataclass(frozen=True)
class GaussianKernel:
    """Square ``(2r+1)^2`` window with ``exp(-d^2 / (2 r^2))`` weights."""

    radius: int

    def __post_init__(self):
        if int(self.radius) != self.radius or self.radius < 1:
            raise ConfigError(f"kernel radius must be an integer >= 1, got {self.radius}")

    @classmethod
    def for_shape(cls, h: int, w: int) -> "GaussianKernel":
        return cls(max(1, int(round(max(h, w) / 8))))

    @property
    def size(self) -> int:
        return 2 * self.radius + 1

    def weights(self) -> np.ndarray:
        r = self.radius
        d = np.arange(-r, r + 1, dtype=np.float64)
        return np.exp(-(d[:, None] ** 2 + d[None, :] ** 2) / (2.0 * r * r))


def _check_attention(attn) -> np.ndarray:
    s = np.asarray(attn, dtype=np.float64)
    if s.ndim != 2 or min(s.shape) < 2:
        raise DomainError(f"attention must be an H x W map with H, W >= 2, got {s.shape}")
    if np.any(s <= 0) or not np.all(np.isfinite(s)):
        raise DomainError("attention entries must be finite and strictly positive")
    return s


def _valid_corr(padded: np.ndarray, kern: np.ndarray, h: int, w: int) -> np.ndarray:
    r = kern.shape[0] // 2
    full = ndimage.correlate(padded, kern, mode="constant", cval=0.0)
    return full[r : r + h, r : r + w]


def _raw_coordinates(s: np.ndarray, kernel: GaussianKernel):
    h, w = s.shape
    r = kernel.radius
    if kernel.size > 2 * min(h, w):
        raise ConfigError(f"kernel window {kernel.size} exceeds twice the map extent {min(h, w)}")
    kern = kernel.weights()
    sp = np.pad(s, r, mode="reflect")
    ii = np.arange(-r, h + r, dtype=np.float64)[:, None] * np.ones((1, w + 2 * r))
    jj = np.ones((h + 2 * r, 1)) * np.arange(-r, w + r, dtype=np.float64)[None, :]
    den = _valid_corr(sp, kern, h, w)
    raw_u = _valid_corr(sp * ii, kern, h, w) / den
    raw_v = _valid_corr(sp * jj, kern, h, w) / den
    return raw_u, raw_v, den, (sp, ii, jj, kern)


def _normalize(raw_u: np.ndarray, raw_v: np.ndarray):
    su = raw_u[-1:, :] - raw_u[:1, :]
    sv = raw_v[:, -1:] - raw_v[:, :1]
    if np.any(su <= 0) or np.any(sv <= 0):
        raise DomainError("degenerate coordinate mapping: border rows or columns coincide")
    u = (raw_u - raw_u[:1, :]) / su
    v = (raw_v - raw_v[:, :1]) / sv
    u[0, :], u[-1, :] = 0.0, 1.0
    v[:, 0], v[:, -1] = 0.0, 1.0
    return np.stack([u, v]), su, sv


def map_coordinates(attn, kernel: GaussianKernel | None = None) -> np.ndarray:
    """Non-uniform sampling grid ``(2, H, W)`` pulled toward high attention."""
    s = _check_attention(attn)
    kernel = kernel or GaussianKernel.for_shape(*s.shape)
    raw_u, raw_v, _, _ = _raw_coordinates(s, kernel)
    grid, _, _ = _normalize(raw_u, raw_v)
    return grid


def _affine_vjp(raw: np.ndarray, out: np.ndarray, scale: np.ndarray, g: np.ndarray, axis: int) -> np.ndarray:
    """Backward of ``out = (raw - raw_first) / (raw_last - raw_first)`` along ``axis``."""
    g = g.copy()
    if axis == 0:
        g[0, :] = 0.0
        g[-1, :] = 0.0
    else:
        g[:, 0] = 0.0
        g[:, -1] = 0.0
    graw = g / scale
    total = (g * out / scale).sum(axis=axis, keepdims=True)
    first = -(g / scale).sum(axis=axis, keepdims=True) + total
    if axis == 0:
        graw[0:1, :] += first
        graw[-1:, :] -= total
    else:
        graw[:, 0:1] += first
        graw[:, -1:] -= total
    return graw


def map_coordinates_vjp(attn, kernel: GaussianKernel | None, grad_grid) -> np.ndarray:
    """Gradient of a scalar objective with respect to the attention map."""
    s = _check_attention(attn)
    kernel = kernel or GaussianKernel.for_shape(*s.shape)
    h, w = s.shape
    r = kernel.radius
    raw_u, raw_v, den, (sp, ii, jj, kern) = _raw_coordinates(s, kernel)
    grid, su, sv = _normalize(raw_u, raw_v)
    gg = np.asarray(grad_grid, dtype=np.float64)
    g_ru = _affine_vjp(raw_u, grid[0], su, gg[0], axis=0)
    g_rv = _affine_vjp(raw_v, grid[1], sv, gg[1], axis=1)

    # raw = corr(sp * coord, G) / corr(sp, G)
    # d raw(i,j) / d sp(a,b) = G(a-i, b-j) * (coord(a,b) - raw(i,j)) / den(i,j)
    def spread(field: np.ndarray) -> np.ndarray:
        placed = np.zeros_like(sp)
        placed[r : r + h, r : r + w] = field
        return ndimage.convolve(placed, kern, mode="constant", cval=0.0)

    a_u, a_v = g_ru / den, g_rv / den
    g_sp = ii * spread(a_u) - spread(a_u * raw_u) + jj * spread(a_v) - spread(a_v * raw_v)
    return _reflect_pad_vjp(g_sp, r, h, w)


def _reflect_pad_vjp(gp: np.ndarray, r: int, h: int, w: int) -> np.ndarray:
    rows = _reflect_index(np.arange(-r, h + r), h)
    cols = _reflect_index(np.arange(-r, w + r), w)
    out = np.zeros((h, w))
    np.add.at(out, (rows[:, None], cols[None, :]), gp)
    return out


def _reflect_index(idx: np.ndarray, n: int) -> np.ndarray:
    """Source index of numpy's ``mode="reflect"`` padding (edge not repeated)."""
    period = 2 * (n - 1)
    m = np.mod(idx, period)
    return np.where(m < n, m, period - m)


def modulate(fmap, attn, kernel: GaussianKernel | None = None):
    """Resample ``fmap`` on the attention-driven grid.

    Returns ``(modulated, grid)``; the grid is needed for demodulation.
    """
    x = as_feature_map(fmap)
    s = _check_attention(attn)
    if s.shape != x.shape[1:]:
        raise DomainError(f"attention {s.shape} does not match feature map {x.shape[1:]}")
    grid = map_coordinates(s, kernel)
    return sample_bilinear(x, grid), grid


def modulate_vjp(fmap, grid, grad_out):
    """Returns ``(grad_fmap, grad_grid)``; chain ``grad_grid`` into
    :func:`map_coordinates_vjp` for the attention gradient."""
    return sample_bilinear_vjp(fmap, grid, grad_out)


def check_grid(grid, tol: float = 1e-9) -> list[str]:
    """List violated grid invariants (empty when the grid is valid)."""
    g = np.asarray(grid, dtype=np.float64)
    problems = []
    if g.ndim != 3 or g.shape[0] != 2:
        return [f"shape {g.shape} is not (2, H, W)"]
    u, v = g
    if np.any(g < 0) or np.any(g > 1):
        problems.append("coordinates outside [0, 1]")
    if not (np.all(u[0] == 0) and np.all(u[-1] == 1) and np.all(v[:, 0] == 0) and np.all(v[:, -1] == 1)):
        problems.append("covering constraints not exact")
    du = np.diff(u, axis=0)
    dv = np.diff(v, axis=1)
    if du.min() < -tol:
        problems.append(f"u decreases down a column by {-du.min():.3g}")
    if dv.min() < -tol:
        problems.append(f"v decreases along a row by {-dv.min():.3g}")
    return problems


def density(grid) -> np.ndarray:
    """Sampling density ``1 / |det J|`` of the map from output to source.

    ``J`` is the finite-difference Jacobian of ``(u, v)`` with respect to the
    normalized output coordinates, so the identity grid has density 1
    everywhere and ``mean(1 / density)`` approximates the covered area (1).
    """
    g = np.asarray(grid, dtype=np.float64)
    _, h, w = g.shape
    di, dj = 1.0 / (h - 1), 1.0 / (w - 1)
    du_di = np.gradient(g[0], di, axis=0)
    du_dj = np.gradient(g[0], dj, axis=1)
    dv_di = np.gradient(g[1], di, axis=0)
    dv_dj = np.gradient(g[1], dj, axis=1)
    det = np.abs(du_di * dv_dj - du_dj * dv_di)
    return 1.0 / np.maximum(det, 1e-12)
