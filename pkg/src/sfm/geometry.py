"""Delaunay triangulation, point location and barycentric weights.

The triangulation is incremental Bowyer-Watson over a hull closed by
"ghost" triangles (one per hull edge, sharing a vertex at infinity), so no
bounding super-triangle is needed. Orientation and in-circle predicates use
a floating-point filter with a static error bound and fall back to exact
rational arithmetic when the filter cannot decide. Points are inserted in
lexicographic order, which fixes the outcome for cocircular configurations
and makes meshes reproducible.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import DomainError

log = logging.getLogger(__name__)

GHOST = -1
MIN_AREA = 1e-12
_EPS = 2.0**-53
_CCW_BOUND = (3.0 + 16.0 * _EPS) * _EPS
_ICC_BOUND = (10.0 + 96.0 * _EPS) * _EPS


# -- predicates --------------------------------------------------------------


def orient2d(a, b, c) -> int:
    """Sign of twice the signed area of ``abc``: +1 counter-clockwise, -1 clockwise, 0 collinear."""
    detleft = (a[0] - c[0]) * (b[1] - c[1])
    detright = (a[1] - c[1]) * (b[0] - c[0])
    det = detleft - detright
    if abs(det) > _CCW_BOUND * (abs(detleft) + abs(detright)):
        return 1 if det > 0 else -1
    ax, ay, bx, by, cx, cy = (Fraction(t) for t in (a[0], a[1], b[0], b[1], c[0], c[1]))
    exact = (ax - cx) * (by - cy) - (ay - cy) * (bx - cx)
    return (exact > 0) - (exact < 0)


def incircle(a, b, c, d) -> int:
    """+1 if ``d`` is strictly inside the circumcircle of counter-clockwise ``abc``."""
    adx, ady = a[0] - d[0], a[1] - d[1]
    bdx, bdy = b[0] - d[0], b[1] - d[1]
    cdx, cdy = c[0] - d[0], c[1] - d[1]
    alift = adx * adx + ady * ady
    blift = bdx * bdx + bdy * bdy
    clift = cdx * cdx + cdy * cdy
    det = (
        alift * (bdx * cdy - cdx * bdy)
        + blift * (cdx * ady - adx * cdy)
        + clift * (adx * bdy - bdx * ady)
    )
    permanent = (
        (abs(bdx * cdy) + abs(cdx * bdy)) * alift
        + (abs(cdx * ady) + abs(adx * cdy)) * blift
        + (abs(adx * bdy) + abs(bdx * ady)) * clift
    )
    if abs(det) > _ICC_BOUND * permanent:
        return 1 if det > 0 else -1
    fx = [Fraction(t) for t in (a[0], a[1], b[0], b[1], c[0], c[1], d[0], d[1])]
    adx, ady = fx[0] - fx[6], fx[1] - fx[7]
    bdx, bdy = fx[2] - fx[6], fx[3] - fx[7]
    cdx, cdy = fx[4] - fx[6], fx[5] - fx[7]
    exact = (
        (adx * adx + ady * ady) * (bdx * cdy - cdx * bdy)
        + (bdx * bdx + bdy * bdy) * (cdx * ady - adx * cdy)
        + (cdx * cdx + cdy * cdy) * (adx * bdy - bdx * ady)
    )
    return (exact > 0) - (exact < 0)


def _strictly_between(a, b, p) -> bool:
    axis = 0 if a[0] != b[0] else 1
    lo, hi = sorted((a[axis], b[axis]))
    return lo < p[axis] < hi


# -- triangulation -----------------------------------------------------------


class _Builder:
    def __init__(self, pts: list):
        self.pts = pts
        self.verts: list[list[int]] = []
        self.nbrs: list[list[int]] = []
        self.alive: list[bool] = []
        self.last = 0

    def add(self, v, n) -> int:
        self.verts.append(list(v))
        self.nbrs.append(list(n))
        self.alive.append(True)
        return len(self.verts) - 1

    def conflicts(self, t: int, p) -> bool:
        a, b, c = self.verts[t]
        pts = self.pts
        if c == GHOST:
            o = orient2d(pts[a], pts[b], p)
            return o > 0 or (o == 0 and _strictly_between(pts[a], pts[b], p))
        return incircle(pts[a], pts[b], pts[c], p) > 0

    def locate(self, p) -> int:
        t = self.last
        if not self.alive[t] or self.verts[t][2] == GHOST:
            t = next(i for i in range(len(self.verts) - 1, -1, -1) if self.alive[i] and self.verts[i][2] != GHOST)
        pts = self.pts
        step = 0
        while True:
            v = self.verts[t]
            if v[2] == GHOST:
                return t
            moved = False
            for k in range(3):
                i = (k + step) % 3
                if orient2d(pts[v[(i + 1) % 3]], pts[v[(i + 2) % 3]], p) < 0:
                    t = self.nbrs[t][i]
                    moved = True
                    break
            if not moved:
                return t
            step += 1

    def insert(self, pi: int) -> None:
        p = self.pts[pi]
        start = self.locate(p)
        if not self.conflicts(start, p):
            # p sits on the circle of the located triangle; search its neighbours
            start = next((n for n in self.nbrs[start] if self.conflicts(n, p)), None)
            if start is None:
                raise DomainError("point location failed")
        cavity = {start}
        stack = [start]
        while stack:
            t = stack.pop()
            for n in self.nbrs[t]:
                if n not in cavity and self.conflicts(n, p):
                    cavity.add(n)
                    stack.append(n)
        boundary = []
        for t in sorted(cavity):
            v, nb = self.verts[t], self.nbrs[t]
            for i in range(3):
                if nb[i] not in cavity:
                    boundary.append((v[(i + 1) % 3], v[(i + 2) % 3], nb[i], t))
        for t in cavity:
            self.alive[t] = False
        new = [self.add((e0, e1, pi), (-1, -1, outer)) for e0, e1, outer, _ in boundary]
        starts = {e0: t for (e0, _, _, _), t in zip(boundary, new)}
        ends = {e1: t for (_, e1, _, _), t in zip(boundary, new)}
        for (e0, e1, outer, old), t in zip(boundary, new):
            self.nbrs[t][0] = starts[e1]
            self.nbrs[t][1] = ends[e0]
            onb = self.nbrs[outer]
            onb[onb.index(old)] = t
        for t in new:
            v, n = self.verts[t], self.nbrs[t]
            if GHOST in v:
                # rotate so the vertex at infinity comes last
                k = (v.index(GHOST) + 1) % 3
                self.verts[t] = v[k:] + v[:k]
                self.nbrs[t] = n[k:] + n[:k]
            else:
                self.last = t


@dataclass
class TriangleMesh:
    """Triangulated point set.

    ``vertices`` is ``(n, 2)``; ``triangles`` is ``(t, 3)`` vertex indices in
    counter-clockwise order; ``vertex_of[i]`` maps input point ``i`` to its
    vertex (duplicates share the vertex of their first occurrence).
    """

    vertices: np.ndarray
    triangles: np.ndarray
    vertex_of: np.ndarray
    _buckets: dict = field(default=None, repr=False, compare=False)

    def signed_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, k]] for k in range(3))
        return 0.5 * ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))

    def to_json(self) -> str:
        return json.dumps({"vertices": self.vertices.tolist(), "triangles": self.triangles.tolist()})

    # -- point location ------------------------------------------------------

    def _bucket_index(self):
        if self._buckets is not None:
            return self._buckets
        lo = self.vertices.min(axis=0)
        span = np.maximum(self.vertices.max(axis=0) - lo, 1e-300)
        edge = 2.0 / math.sqrt(max(len(self.triangles), 1)) * span
        counts = np.maximum(np.ceil(span / edge).astype(int), 1)
        tri_pts = self.vertices[self.triangles]
        first = np.clip(((tri_pts.min(axis=1) - lo) / edge).astype(int), 0, counts - 1)
        last = np.clip(((tri_pts.max(axis=1) - lo) / edge).astype(int), 0, counts - 1)
        table: dict[int, list[int]] = {}
        for t in range(len(self.triangles)):
            for bx in range(first[t, 0], last[t, 0] + 1):
                for by in range(first[t, 1], last[t, 1] + 1):
                    table.setdefault(bx * counts[1] + by, []).append(t)
        self._buckets = {"lo": lo, "edge": edge, "counts": counts, "table": table}
        return self._buckets

    def locate(self, queries, tol: float = 1e-12):
        """Containing triangle and barycentric weights for each query.

        Returns ``(tri, weights)``; ``tri`` is -1 where no triangle contains
        the query within ``tol``.
        """
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        b = self._bucket_index()
        cell = np.clip(((q - b["lo"]) / b["edge"]).astype(int), 0, b["counts"] - 1)
        key = cell[:, 0] * b["counts"][1] + cell[:, 1]
        tri = np.full(len(q), -1, dtype=np.int64)
        weights = np.zeros((len(q), 3))
        order = np.argsort(key, kind="stable")
        keys_sorted = key[order]
        splits = np.flatnonzero(np.diff(keys_sorted)) + 1
        for group in np.split(order, splits):
            cand = b["table"].get(int(key[group[0]]))
            if not cand:
                continue
            cand = np.asarray(cand)
            w = _bary_many(self.vertices[self.triangles[cand]], q[group])
            inside = np.all(w >= -tol, axis=2)
            hit = inside.any(axis=1)
            pick = np.argmax(inside, axis=1)
            rows = group[hit]
            tri[rows] = cand[pick[hit]]
            weights[rows] = w[np.flatnonzero(hit), pick[hit]]
        return tri, weights

    def locate_or_nearest(self, queries, tol: float = 1e-12):
        """Like :meth:`locate`, but a query outside the hull takes the weights
        of the closest point on its nearest triangle (constant extension)."""
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        tri, weights = self.locate(q, tol)
        missing = np.flatnonzero(tri < 0)
        if missing.size:
            log.warning("%d queries outside the mesh hull; using nearest triangles", missing.size)
            corners = self.vertices[self.triangles]
            for m in missing:
                dist, closest = _triangle_distance(corners, q[m])
                t = int(np.argmin(dist))
                tri[m] = t
                weights[m] = barycentric_weights(corners[t], closest[t])
        return tri, weights


def _bary_many(corners: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Barycentric weights ``(len(q), len(corners), 3)``."""
    i1, j1 = corners[:, 0, 0], corners[:, 0, 1]
    i2, j2 = corners[:, 1, 0], corners[:, 1, 1]
    i3, j3 = corners[:, 2, 0], corners[:, 2, 1]
    den = (j2 - j3) * (i1 - i3) + (i3 - i2) * (j1 - j3)
    di = q[:, 0:1] - i3
    dj = q[:, 1:2] - j3
    w1 = ((j2 - j3) * di + (i3 - i2) * dj) / den
    w2 = ((j3 - j1) * di + (i1 - i3) * dj) / den
    return np.stack([w1, w2, 1.0 - w1 - w2], axis=-1)


def _triangle_distance(corners: np.ndarray, p: np.ndarray):
    """Distance from ``p`` to each triangle and the closest point on it."""
    w = _bary_many(corners, p[None])[0]
    inside = np.all(w >= 0, axis=1)
    best = np.full(len(corners), np.inf)
    closest = np.repeat(p[None], len(corners), axis=0)
    for k in range(3):
        a, b = corners[:, k], corners[:, (k + 1) % 3]
        ab = b - a
        t = np.clip(((p - a) * ab).sum(1) / np.maximum((ab * ab).sum(1), 1e-300), 0, 1)
        foot = a + t[:, None] * ab
        d = np.hypot(*(foot - p).T)
        better = (d < best) & ~inside
        best = np.where(better, d, best)
        closest[better] = foot[better]
    return np.where(inside, 0.0, best), closest


def barycentric_weights(tri, query):
    """Weights ``(w1, w2, w3)`` of ``query`` in triangle ``tri`` (3 points).

    ``w1`` and ``w2`` follow the closed form; ``w3 = 1 - w1 - w2``, so the
    weights sum to one exactly.
    """
    (i1, j1), (i2, j2), (i3, j3) = np.asarray(tri, dtype=np.float64)
    i, j = (float(t) for t in query)
    den = (j2 - j3) * (i1 - i3) + (i3 - i2) * (j1 - j3)
    if abs(den) <= 2 * MIN_AREA:
        raise DomainError("degenerate triangle")
    w1 = ((j2 - j3) * (i - i3) + (i3 - i2) * (j - j3)) / den
    w2 = ((j3 - j1) * (i - i3) + (i1 - i3) * (j - j3)) / den
    return np.array([w1, w2, 1.0 - w1 - w2])


def delaunay(points) -> TriangleMesh:
    """Delaunay triangulation of a 2-D point set.

    Exact duplicates are merged (first index wins). Raises
    :class:`DomainError` if fewer than three non-collinear points remain.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise DomainError(f"points must be (n, 2), got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise DomainError("points must be finite")
    uniq, first, inverse = np.unique(pts, axis=0, return_index=True, return_inverse=True)
    # vertex numbering follows first occurrence in the input
    by_input = np.argsort(first, kind="stable")
    rank = np.empty_like(by_input)
    rank[by_input] = np.arange(len(by_input))
    vertices = pts[np.sort(first)]
    vertex_of = rank[inverse.ravel()]
    n = len(vertices)
    if n < 3:
        raise DomainError(f"need at least 3 distinct points, got {n}")

    coords = [tuple(v) for v in vertices]
    order = np.lexsort((vertices[:, 1], vertices[:, 0]))
    a, b = int(order[0]), int(order[1])
    k = next((int(c) for c in order[2:] if orient2d(coords[a], coords[b], coords[int(c)]) != 0), None)
    if k is None:
        raise DomainError("all points are collinear")

    bld = _Builder(coords)
    if orient2d(coords[a], coords[b], coords[k]) < 0:
        a, b = b, a
    # real triangle 0, ghosts across its edges (opposite a, b, k)
    bld.add((a, b, k), (2, 3, 1))
    bld.add((b, a, GHOST), (-1, -1, 0))  # across edge a-b
    bld.add((k, b, GHOST), (-1, -1, 0))  # across edge b-k
    bld.add((a, k, GHOST), (-1, -1, 0))  # across edge k-a
    _link_ghost_ring(bld)
    for idx in order:
        idx = int(idx)
        if idx not in (a, b, k):
            bld.insert(idx)

    tris = np.asarray([v for v, live in zip(bld.verts, bld.alive) if live and GHOST not in v], dtype=np.int64)
    mesh = TriangleMesh(vertices, tris.reshape(-1, 3), vertex_of)
    # near-collinear hull slivers are exact Delaunay triangles but useless for interpolation
    keep = mesh.signed_areas() > MIN_AREA
    if not keep.all():
        log.debug("dropping %d sliver triangles", int((~keep).sum()))
        mesh = TriangleMesh(vertices, mesh.triangles[keep], vertex_of)
    return mesh


def _link_ghost_ring(bld: _Builder) -> None:
    """Point each initial ghost ``(x, y, G)`` at its two ghost neighbours."""
    ghosts = [t for t in range(len(bld.verts)) if bld.verts[t][2] == GHOST]
    for t in ghosts:
        x, y, _ = bld.verts[t]
        # opposite x is edge (y, G): shared with the ghost that starts at y
        nxt = next(g for g in ghosts if bld.verts[g][0] == y)
        # opposite y is edge (G, x): shared with the ghost that ends at x
        prv = next(g for g in ghosts if bld.verts[g][1] == x)
        bld.nbrs[t] = [nxt, prv, 0]


def triangulate(grid) -> TriangleMesh:
    """Delaunay mesh over the ``(u, v)`` points of a ``(2, H, W)`` grid.

    Input point ``i*W + j`` corresponds to grid position ``(i, j)``.
    """
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 3 or g.shape[0] != 2:
        raise DomainError(f"grid must have shape (2, H, W), got {g.shape}")
    return delaunay(g.reshape(2, -1).T)
