"""Loss terms, their gradients and a finite-difference gradient checker."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .attention import edge_attention
from .errors import ConfigError, DomainError, NumericalError
from .spectral import NYQUIST, high_band_power, high_band_power_grad
from .tensor import as_feature_map, check_labels
from .warp import GaussianKernel, map_coordinates


@dataclass(frozen=True)
class LossWeights:
    fm: float = 0.01
    shf: float = 100.0

    def __post_init__(self):
        if self.fm < 0 or self.shf < 0:
            raise ConfigError("loss weights must be non-negative")


def fm_loss(modulated, nu: float = NYQUIST) -> float:
    """Mean high-band power of the modulated feature, averaged over channels."""
    return high_band_power(as_feature_map(modulated), nu)


def fm_loss_grad(modulated, nu: float = NYQUIST) -> np.ndarray:
    x = as_feature_map(modulated)
    return np.stack([high_band_power_grad(ch, nu) for ch in x]) / x.shape[0]


def shf_targets(labels, kernel: GaussianKernel | None = None, blur_sigma: float = 1.0, floor: float = 0.1) -> np.ndarray:
    """Target grid that samples densely around class boundaries.

    The rectified Laplacian of the label map is blurred, turned into an
    attention map (see :func:`sfm.attention.edge_attention`) and pushed
    through :func:`sfm.warp.map_coordinates`. Single-class maps yield the
    identity grid.
    """
    lab = np.asarray(labels)
    if lab.ndim != 2:
        raise DomainError(f"label map must be 2-D, got {lab.shape}")
    attn = edge_attention(lab.astype(np.float64), blur_sigma, floor)
    return map_coordinates(attn, kernel)


def _check_pair(grid, target):
    g = np.asarray(grid, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if g.shape != t.shape:
        raise DomainError(f"grid {g.shape} and target {t.shape} differ in shape")
    return g, t


def shf_loss(grid, target) -> float:
    """``||u - u_hat||_2 + ||v - v_hat||_2`` over all pixels."""
    g, t = _check_pair(grid, target)
    return float(np.linalg.norm(g[0] - t[0]) + np.linalg.norm(g[1] - t[1]))


def shf_loss_grad(grid, target) -> np.ndarray:
    g, t = _check_pair(grid, target)
    out = np.zeros_like(g)
    for k in range(2):
        diff = g[k] - t[k]
        norm = np.linalg.norm(diff)
        if norm > 0:
            out[k] = diff / norm
    return out


def seg_loss(pred, labels) -> float:
    """Pixel-averaged softmax cross-entropy of ``(K, H, W)`` class scores."""
    z = as_feature_map(pred)
    lab = check_labels(labels, z.shape[0])
    if lab.shape != z.shape[1:]:
        raise DomainError(f"labels {lab.shape} do not match prediction {z.shape[1:]}")
    zmax = z.max(axis=0)
    lse = zmax + np.log(np.exp(z - zmax).sum(axis=0))
    picked = np.take_along_axis(z, lab[None], axis=0)[0]
    return float((lse - picked).mean())


def seg_loss_grad(pred, labels) -> np.ndarray:
    z = as_feature_map(pred)
    lab = check_labels(labels, z.shape[0])
    p = ops.softmax(z, axis=0)
    np.put_along_axis(p, lab[None], np.take_along_axis(p, lab[None], axis=0) - 1.0, axis=0)
    return p / lab.size


def total_loss(seg: float, fm: float, shf: float, weights: LossWeights = LossWeights()) -> float:
    """``seg + w.fm * fm + w.shf * shf``."""
    return seg + weights.fm * fm + weights.shf * shf


def poly_lr(base_lr: float, it: int, max_iter: int, power: float = 0.9) -> float:
    """Poly schedule: ``base_lr * (1 - it / max_iter) ** power``."""
    return base_lr * (1.0 - it / max_iter) ** power


@dataclass
class GradReport:
    """Worst relative discrepancy between analytic and central-difference gradients."""

    max_rel_error: float
    max_abs_error: float
    step: float
    analytic: np.ndarray
    numeric: np.ndarray

    def ok(self, tol: float) -> bool:
        return self.max_rel_error <= tol


def grad_check(f, grad, point, eps: float = 1e-4, indices=None, floor: float = 1e-8) -> GradReport:
    """Compare ``grad(point)`` against central differences of scalar ``f``.

    The relative error of each coordinate is ``|a - n| / max(|a|, |n|,
    floor)``; ``indices`` restricts the check to a subset of flat indices.
    """
    x0 = np.array(point, dtype=np.float64)
    analytic = np.asarray(grad(x0.copy()), dtype=np.float64).ravel()
    if not np.all(np.isfinite(analytic)):
        raise NumericalError("analytic gradient is not finite")
    idx = np.arange(x0.size) if indices is None else np.asarray(indices)
    numeric = np.zeros(len(idx))
    flat = x0.ravel()
    for n, i in enumerate(idx):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += eps
        xm[i] -= eps
        fp = f(xp.reshape(x0.shape))
        fm = f(xm.reshape(x0.shape))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"objective is not finite near coordinate {i}")
        numeric[n] = (fp - fm) / (2 * eps)
    a = analytic[idx]
    abs_err = np.abs(a - numeric)
    rel = abs_err / np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
    return GradReport(float(rel.max(initial=0.0)), float(abs_err.max(initial=0.0)), eps, a, numeric)
