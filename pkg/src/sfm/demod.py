"""Demodulation: barycentric upsampling from the non-uniform grid followed by
a cascade of local pixel relation modules (LPRMs).

Each LPRM predicts a per-pixel softmax over a dilated 3x3 neighbourhood and
uses it as a convex filter on the prediction. The first stage conditions on
the compressed feature; every later stage conditions on the previous
stage's relation map, and the dilation doubles from stage to stage.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from . import ops
from .errors import DomainError
from .geometry import triangulate
from .tensor import as_feature_map

log = logging.getLogger(__name__)

DILATIONS = (1, 2, 4, 8, 16, 32, 64)
RELATIONS = 9
CENTER = RELATIONS // 2


# -- non-uniform upsampling --------------------------------------------------


def nuu_operator(grid, out_h: int, out_w: int) -> sparse.csr_matrix:
    """Sparse ``(out_h*out_w, H*W)`` matrix of barycentric weights.

    Row ``r`` blends the three grid samples whose triangle contains the
    ``r``-th uniform output location ``(i/(out_h-1), j/(out_w-1))``.
    """
    g = np.asarray(grid, dtype=np.float64)
    _, h, w = g.shape
    mesh = triangulate(g)
    uu, vv = np.meshgrid(np.linspace(0, 1, out_h), np.linspace(0, 1, out_w), indexing="ij")
    queries = np.stack([uu.ravel(), vv.ravel()], axis=1)
    tri, weights = mesh.locate_or_nearest(queries)
    # map mesh vertices back to the first grid sample that produced them
    first_input = np.full(len(mesh.vertices), -1)
    for idx in range(h * w - 1, -1, -1):
        first_input[mesh.vertex_of[idx]] = idx
    cols = first_input[mesh.triangles[tri]]
    rows = np.repeat(np.arange(len(queries)), 3)
    return sparse.csr_matrix((weights.ravel(), (rows, cols.ravel())), shape=(len(queries), h * w))


def nuu_upsample(modulated, grid, out_h: int, out_w: int, operator=None) -> np.ndarray:
    """Resample a non-uniformly represented map onto a uniform ``out_h x out_w`` grid.

    ``grid`` gives the source position of every sample of ``modulated``;
    values are interpolated linearly inside Delaunay triangles of those
    positions. Pass a prebuilt :func:`nuu_operator` to reuse the mesh.
    """
    x = as_feature_map(modulated)
    g = np.asarray(grid, dtype=np.float64)
    if g.shape != (2,) + x.shape[1:]:
        raise DomainError(f"grid {g.shape} does not match feature map {x.shape}")
    op = nuu_operator(g, out_h, out_w) if operator is None else operator
    c = x.shape[0]
    return (op @ x.reshape(c, -1).T).T.reshape(c, out_h, out_w)


def nuu_upsample_vjp(operator, grad_out, in_shape) -> np.ndarray:
    """Gradient with respect to the sample values; mesh geometry is held fixed."""
    c = grad_out.shape[0]
    return (operator.T @ grad_out.reshape(c, -1).T).T.reshape(in_shape)


# -- local pixel relation modules --------------------------------------------


def lprm_relation(xcomp, weight, bias, dilation: int = 1) -> np.ndarray:
    """``softmax_channels(conv3x3_dilated(xcomp))`` with 9 output channels."""
    x = np.asarray(xcomp, dtype=np.float64)
    return ops.softmax(ops.conv2d(x, weight, bias, dilation), axis=0)


def lprm_relation_vjp(xcomp, weight, relation, g, dilation: int = 1):
    """Returns ``(grad_xcomp, grad_weight, grad_bias)``."""
    g_logits = ops.softmax_vjp(relation, g, axis=0)
    return ops.conv2d_vjp(np.asarray(xcomp, dtype=np.float64), weight, g_logits, dilation)


def lprm_refine(pred, relation, dilation: int = 1) -> np.ndarray:
    """``out[c, i, j] = sum_n R[n, i, j] * pred[c, i + p_n d, j + q_n d]`` (replicate padding)."""
    y = np.asarray(pred, dtype=np.float64)
    r = np.asarray(relation, dtype=np.float64)
    if r.shape != (RELATIONS,) + y.shape[1:]:
        raise DomainError(f"relation field {r.shape} does not match prediction {y.shape}")
    out = np.zeros_like(y)
    for n, (p, q) in enumerate(ops.offsets(3, dilation)):
        out += r[n] * ops.shift(y, p, q)
    return out


def lprm_refine_vjp(pred, relation, g, dilation: int = 1):
    """Returns ``(grad_pred, grad_relation)``."""
    y = np.asarray(pred, dtype=np.float64)
    gy = np.zeros_like(y)
    gr = np.zeros_like(relation)
    for n, (p, q) in enumerate(ops.offsets(3, dilation)):
        gr[n] = (g * ops.shift(y, p, q)).sum(axis=0)
        gy += ops.shift_vjp(g * relation[n], p, q)
    return gy, gr


@dataclass
class LPRMParams:
    """Relation-conv weights per stage: stage 0 reads the compressed feature,
    later stages read the previous 9-channel relation map."""

    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)
    dilations: tuple = DILATIONS

    @classmethod
    def zeros(cls, comp_channels: int, dilations=DILATIONS):
        dil = tuple(dilations)
        ws = [np.zeros((RELATIONS, comp_channels if s == 0 else RELATIONS, 3, 3)) for s in range(len(dil))]
        return cls(ws, [np.zeros(RELATIONS) for _ in dil], dil)

    @classmethod
    def identity(cls, comp_channels: int, dilations=DILATIONS, strength: float = 50.0):
        """Relations saturated on the centre tap, making every stage a no-op."""
        params = cls.zeros(comp_channels, dilations)
        for b in params.biases:
            b[CENTER] = strength
        return params

    def copy(self):
        return LPRMParams([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.dilations)


def active_stages(params: LPRMParams, h: int, w: int):
    """Indices of stages whose dilation fits the map (``d <= min(H, W) / 2``)."""
    keep = []
    for s, d in enumerate(params.dilations):
        if d > min(h, w) / 2:
            log.warning("skipping LPRM stage with dilation %d on a %dx%d map", d, h, w)
            continue
        keep.append(s)
    return keep


def lprm_cascade_forward(pred, xcomp, params: LPRMParams, refine_original: bool = False):
    """Run the cascade on already-upsampled inputs.

    Returns ``(output, trace)``. With ``refine_original`` every stage filters
    the incoming prediction instead of the previous stage's output.
    """
    y = np.asarray(pred, dtype=np.float64)
    cond = np.asarray(xcomp, dtype=np.float64)
    trace = []
    out = y
    for s in active_stages(params, *y.shape[1:]):
        d = params.dilations[s]
        if trace and cond.shape[0] != RELATIONS:
            raise DomainError("relation stages after the first need 9 input channels")
        rel = lprm_relation(cond, params.weights[s], params.biases[s], d)
        src = y if refine_original else out
        trace.append({"stage": s, "cond": cond, "rel": rel, "src": src})
        out = lprm_refine(src, rel, d)
        cond = rel
    return out, trace


def lprm_cascade_vjp(params: LPRMParams, trace, g_out, refine_original: bool = False):
    """Backward pass of :func:`lprm_cascade_forward`.

    Returns ``(grads, grad_pred, grad_xcomp)`` where ``grads`` has
    ``"weights"`` and ``"biases"`` lists aligned with ``params``.
    """
    gw = [np.zeros_like(w) for w in params.weights]
    gb = [np.zeros_like(b) for b in params.biases]
    if not trace:
        return {"weights": gw, "biases": gb}, g_out.copy(), None
    g_y = np.zeros_like(g_out)
    g = g_out  # gradient reaching the current stage's refined output
    g_rel_next = None
    g_cond = None
    for step in reversed(trace):
        s = step["stage"]
        d = params.dilations[s]
        if g is not None:
            g_src, g_rel = lprm_refine_vjp(step["src"], step["rel"], g, d)
        else:
            g_src, g_rel = None, np.zeros_like(step["rel"])
        if g_rel_next is not None:
            g_rel = g_rel + g_rel_next
        g_cond, gw[s], gb[s] = lprm_relation_vjp(step["cond"], params.weights[s], step["rel"], g_rel, d)
        g_rel_next = g_cond
        if refine_original:
            # only the last stage's refinement reaches the output
            if g_src is not None:
                g_y += g_src
            g = None
        else:
            g = g_src
    if not refine_original:
        g_y = g
    return {"weights": gw, "biases": gb}, g_y, g_cond


def msau(pred, xcomp, grid, out_h: int, out_w: int, params: LPRMParams, refine_original: bool = False):
    """Barycentric upsampling of both inputs followed by the LPRM cascade.

    ``pred`` and ``xcomp`` are low-resolution maps whose samples sit at the
    positions of ``grid``.
    """
    op = nuu_operator(grid, out_h, out_w)
    y = nuu_upsample(pred, grid, out_h, out_w, op)
    c = nuu_upsample(xcomp, grid, out_h, out_w, op)
    out, _ = lprm_cascade_forward(y, c, params, refine_original)
    return out
