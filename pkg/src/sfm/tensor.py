"""Dense containers, uniform resampling primitives and SFMT / PGM file I/O.

Feature maps are plain ``float64`` numpy arrays of shape ``(C, H, W)``.
Normalized coordinates ``(u, v)`` in ``[0, 1]^2`` address pixel centres at
``(u * (H - 1), v * (W - 1))``; sampling is bilinear with clamped indexing.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import DomainError, FormatError

MAGIC = b"SFMT"
VERSION = 1
_HEADER = struct.Struct("<4sII")


def as_feature_map(x) -> np.ndarray:
    """Return ``x`` as a ``(C, H, W)`` float64 array, promoting 2-D input."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise DomainError(f"feature map must be 2-D or 3-D, got shape {arr.shape}")
    c, h, w = arr.shape
    if c < 1 or h < 2 or w < 2:
        raise DomainError(f"feature map needs C>=1, H>=2, W>=2, got {arr.shape}")
    return arr


def check_labels(labels, num_classes: int) -> np.ndarray:
    """Validate an ``(H, W)`` label map against a class count."""
    lab = np.asarray(labels)
    if lab.ndim != 2:
        raise DomainError(f"label map must be 2-D, got shape {lab.shape}")
    if not np.issubdtype(lab.dtype, np.integer):
        if not np.all(lab == np.round(lab)):
            raise DomainError("label map must hold integer class ids")
        lab = lab.astype(np.int64)
    if lab.size and (lab.min() < 0 or lab.max() >= num_classes):
        raise DomainError(f"label ids must lie in [0, {num_classes})")
    return lab.astype(np.int64)


# -- bilinear sampling -------------------------------------------------------


def _corners(pos: np.ndarray, extent: int):
    lo = np.clip(np.floor(pos).astype(np.int64), 0, extent - 2)
    return lo, pos - lo


def bilinear_at(fmap, u: float, v: float, channel: int = 0) -> float:
    """Bilinear value of one channel at normalized position ``(u, v)``."""
    x = as_feature_map(fmap)
    if not (0.0 <= u <= 1.0 and 0.0 <= v <= 1.0):
        raise DomainError(f"coordinates must lie in [0, 1], got ({u}, {v})")
    _, h, w = x.shape
    r0, fr = _corners(np.float64(u * (h - 1)), h)
    c0, fc = _corners(np.float64(v * (w - 1)), w)
    img = x[channel]
    return float(
        img[r0, c0] * (1 - fr) * (1 - fc)
        + img[r0 + 1, c0] * fr * (1 - fc)
        + img[r0, c0 + 1] * (1 - fr) * fc
        + img[r0 + 1, c0 + 1] * fr * fc
    )


def _check_grid(grid: np.ndarray) -> np.ndarray:
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 3 or g.shape[0] != 2:
        raise DomainError(f"coordinate grid must have shape (2, H, W), got {g.shape}")
    if np.any(g < -1e-12) or np.any(g > 1 + 1e-12):
        raise DomainError("grid coordinates must lie in [0, 1]")
    return np.clip(g, 0.0, 1.0)


def sample_bilinear(fmap, grid) -> np.ndarray:
    """Sample every channel of ``fmap`` at the positions of ``grid``.

    ``grid`` has shape ``(2, H', W')`` holding the u-plane then the v-plane;
    the result has shape ``(C, H', W')``.
    """
    x = as_feature_map(fmap)
    g = _check_grid(grid)
    _, h, w = x.shape
    r0, fr = _corners(g[0] * (h - 1), h)
    c0, fc = _corners(g[1] * (w - 1), w)
    return (
        x[:, r0, c0] * ((1 - fr) * (1 - fc))
        + x[:, r0 + 1, c0] * (fr * (1 - fc))
        + x[:, r0, c0 + 1] * ((1 - fr) * fc)
        + x[:, r0 + 1, c0 + 1] * (fr * fc)
    )


def sample_bilinear_vjp(fmap, grid, grad_out):
    """Vector-Jacobian product of :func:`sample_bilinear`.

    Returns ``(grad_fmap, grad_grid)``. The derivative with respect to the
    coordinates is one-sided at integer pixel positions.
    """
    x = as_feature_map(fmap)
    g = _check_grid(grid)
    go = np.asarray(grad_out, dtype=np.float64)
    c, h, w = x.shape
    r0, fr = _corners(g[0] * (h - 1), h)
    c0, fc = _corners(g[1] * (w - 1), w)

    grad_x = np.zeros_like(x)
    flat = grad_x.reshape(c, -1)
    for dr, dc, wt in (
        (0, 0, (1 - fr) * (1 - fc)),
        (1, 0, fr * (1 - fc)),
        (0, 1, (1 - fr) * fc),
        (1, 1, fr * fc),
    ):
        idx = ((r0 + dr) * w + (c0 + dc)).ravel()
        contrib = (go * wt).reshape(c, -1)
        for ch in range(c):
            flat[ch] += np.bincount(idx, weights=contrib[ch], minlength=h * w)

    v00, v10 = x[:, r0, c0], x[:, r0 + 1, c0]
    v01, v11 = x[:, r0, c0 + 1], x[:, r0 + 1, c0 + 1]
    d_fr = (v10 - v00) * (1 - fc) + (v11 - v01) * fc
    d_fc = (v01 - v00) * (1 - fr) + (v11 - v10) * fr
    grad_grid = np.stack(
        [(go * d_fr).sum(0) * (h - 1), (go * d_fc).sum(0) * (w - 1)]
    )
    return grad_x, grad_grid


def identity_grid(h: int, w: int) -> np.ndarray:
    """Uniform grid ``u = i / (H - 1)``, ``v = j / (W - 1)`` of shape (2, H, W)."""
    u = np.linspace(0.0, 1.0, h)[:, None] * np.ones((1, w))
    v = np.ones((h, 1)) * np.linspace(0.0, 1.0, w)[None, :]
    return np.stack([u, v])


# -- uniform down/up sampling ------------------------------------------------


def decimate(fmap, stride: int) -> np.ndarray:
    """Keep every ``stride``-th row and column: ``out[i, j] = in[i*s, j*s]``."""
    if int(stride) != stride or stride < 2:
        raise DomainError(f"stride must be an integer >= 2, got {stride}")
    x = np.asarray(fmap, dtype=np.float64)
    return x[..., ::stride, ::stride].copy()


def decimate_vjp(grad_out, stride: int, shape) -> np.ndarray:
    """Adjoint of :func:`decimate`: scatter gradients back onto ``shape``."""
    out = np.zeros(shape, dtype=np.float64)
    out[..., ::stride, ::stride] = grad_out
    return out


def upsample_bilinear(low, stride: int, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear upsampling of a decimated map back to ``(out_h, out_w)``.

    Low-resolution sample ``(a, b)`` sits at source pixel ``(a*stride,
    b*stride)``; positions past the last sample are clamped.
    """
    x = as_feature_map(low)
    _, h, w = x.shape
    rows = np.minimum(np.arange(out_h) / stride, h - 1)
    cols = np.minimum(np.arange(out_w) / stride, w - 1)
    grid = np.stack(np.meshgrid(rows / (h - 1), cols / (w - 1), indexing="ij"))
    return sample_bilinear(x, grid)


# -- file I/O ----------------------------------------------------------------


def write_tensor(path, data) -> None:
    """Write ``data`` as an SFMT file (little-endian, float32 payload).

    The file is written to a temporary sibling and renamed into place.
    """
    arr = np.asarray(data, dtype=np.float64)
    if not 1 <= arr.ndim <= 4:
        raise DomainError(f"SFMT holds 1 to 4 dimensions, got {arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise DomainError("refusing to write non-finite values")
    payload = arr.astype("<f4")
    header = _HEADER.pack(MAGIC, VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    atomic_write_bytes(path, header + payload.tobytes(order="C"))


def read_tensor(path) -> np.ndarray:
    """Read an SFMT file into a float64 array."""
    blob = Path(path).read_bytes()
    return decode_tensor(blob)


def decode_tensor(blob: bytes) -> np.ndarray:
    if len(blob) < _HEADER.size:
        raise FormatError("truncated header", len(blob))
    magic, version, ndim = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if not 1 <= ndim <= 4:
        raise FormatError(f"ndim must be 1..4, got {ndim}", 8)
    off = _HEADER.size
    if len(blob) < off + 4 * ndim:
        raise FormatError("truncated extents", len(blob))
    shape = struct.unpack_from(f"<{ndim}I", blob, off)
    off += 4 * ndim
    if any(s < 1 for s in shape):
        raise FormatError(f"extents must be >= 1, got {shape}", _HEADER.size)
    count = int(np.prod(shape))
    need = off + 4 * count
    if len(blob) < need:
        raise FormatError(f"truncated payload: need {need} bytes, have {len(blob)}", len(blob))
    if len(blob) > need:
        raise FormatError("trailing bytes after payload", need)
    values = np.frombuffer(blob, dtype="<f4", count=count, offset=off)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise FormatError("non-finite value in payload", off + 4 * int(bad[0]))
    return values.astype(np.float64).reshape(shape)


def read_pgm(path) -> np.ndarray:
    """Read a binary (P5, maxval 255) PGM as a ``(1, H, W)`` array in [0, 1]."""
    blob = Path(path).read_bytes()
    if blob[:2] != b"P5":
        raise FormatError("not a P5 PGM", 0)
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header", pos)
        fields.append(blob[start:pos])
    pos += 1  # single whitespace byte before raster
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError:
        raise FormatError("malformed PGM header", 2) from None
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}", 2)
    if len(blob) < pos + w * h:
        raise FormatError("truncated PGM raster", len(blob))
    raster = np.frombuffer(blob, dtype=np.uint8, count=w * h, offset=pos)
    return (raster.astype(np.float64) / 255.0).reshape(1, h, w)


def load_input(path) -> np.ndarray:
    """Load an SFMT tensor or a P5 PGM as a feature map, sniffing the magic."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head[:2] == b"P5":
        return read_pgm(path)
    return as_feature_map(read_tensor(path))


def write_pgm(path, image) -> None:
    """Write a 2-D array in [0, 1] as an 8-bit P5 PGM."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[0]
    raster = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    h, w = raster.shape
    atomic_write_bytes(path, f"P5\n{w} {h}\n255\n".encode() + raster.tobytes())


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))
