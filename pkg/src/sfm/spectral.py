"""2-D DFT and frequency-domain metrics of feature maps.

The forward transform carries the ``1/(MN)`` factor, the inverse none.
Frequencies use the signed convention: bin ``k > M/2`` stands for ``k - M``,
so ``|k/M|`` ranges over ``[0, 1/2]``. The high band at threshold ``nu``
holds every bin with ``|k/M| > nu`` or ``|l/N| > nu``; a bin exactly at
``nu`` belongs to the low band.

Multichannel inputs are reduced by computing each metric per channel and
taking the arithmetic mean.
"""

from __future__ import annotations

import numpy as np

from .errors import DomainError

NYQUIST = 0.25


def _grid2d(channel) -> np.ndarray:
    x = np.asarray(channel, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 2:
        raise DomainError(f"expected an H x W grid with H, W >= 2, got {x.shape}")
    return x


def dft2d(channel) -> np.ndarray:
    """Forward DFT with ``F(k, l) = 1/(MN) * sum f(m, n) exp(-2 pi j (km/M + ln/N))``."""
    x = _grid2d(channel)
    return np.fft.fft2(x) / x.size


def idft2d(spectrum) -> np.ndarray:
    """Inverse of :func:`dft2d`; returns the real part."""
    f = np.asarray(spectrum, dtype=np.complex128)
    return np.real(np.fft.ifft2(f) * f.size)


def signed_frequencies(n: int) -> np.ndarray:
    """``|k/n|`` for ``k = 0..n-1`` under the signed convention."""
    k = np.arange(n)
    return np.abs(np.where(k > n / 2, k - n, k)) / n


def high_band_mask(shape, nu: float = NYQUIST) -> np.ndarray:
    """Boolean mask of bins above the threshold ``nu`` on either axis."""
    m, n = shape
    fk = signed_frequencies(m)[:, None]
    fl = signed_frequencies(n)[None, :]
    return (fk > nu) | (fl > nu)


def radial_max_frequency(shape) -> np.ndarray:
    """``max(|k/M|, |l/N|)`` per bin."""
    m, n = shape
    return np.maximum(signed_frequencies(m)[:, None], signed_frequencies(n)[None, :])


def _channels(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        return arr[None]
    if arr.ndim == 3:
        return arr
    raise DomainError(f"expected a 2-D or 3-D array, got shape {arr.shape}")


def aliasing_ratio(x, nu: float = NYQUIST) -> float:
    """Share of spectral magnitude ``|F|`` lying in the high band.

    An all-zero map has ratio 0.
    """
    vals = []
    for ch in _channels(x):
        mag = np.abs(dft2d(ch))
        total = mag.sum()
        vals.append(0.0 if total == 0 else mag[high_band_mask(mag.shape, nu)].sum() / total)
    return float(np.mean(vals))


def lfr(x, xi: float) -> float:
    """Low-frequency ratio: share of power ``|F|^2`` with ``max(|k/M|, |l/N|) < xi``."""
    if xi <= 0:
        raise DomainError(f"xi must be positive, got {xi}")
    vals = []
    for ch in _channels(x):
        power = np.abs(dft2d(ch)) ** 2
        total = power.sum()
        if total == 0:
            vals.append(1.0)
            continue
        vals.append(power[radial_max_frequency(power.shape) < xi].sum() / total)
    return float(np.mean(vals))


def lfr_curve(x, xis) -> np.ndarray:
    """:func:`lfr` evaluated on a sequence of thresholds."""
    return np.array([lfr(x, xi) for xi in xis])


def rdf(x, bins: int = 50):
    """Ratio density function: finite-difference derivative of the LFR.

    The interval ``[0, 1/2]`` is split into ``bins`` equal cells; cell ``b``
    collects power with ``b*d <= max(|k/M|, |l/N|) < (b+1)*d`` and the last
    cell also takes the bins at exactly 1/2. Returns ``(upper_edges,
    density)`` with ``sum(density) * d + LFR(0) == 1`` (``LFR(0) = 0``).
    """
    if bins < 2:
        raise DomainError(f"bins must be >= 2, got {bins}")
    edges = np.linspace(0.0, 0.5, bins + 1)
    step = edges[1] - edges[0]
    dens = []
    for ch in _channels(x):
        power = np.abs(dft2d(ch)) ** 2
        total = power.sum()
        radius = radial_max_frequency(power.shape)
        cum = np.array([power[radius < e].sum() for e in edges[:-1]] + [power.sum()])
        if total == 0:
            cum = np.zeros(bins + 1)
            cum[1:] = 1.0
        else:
            cum = cum / total
        dens.append(np.diff(cum) / step)
    return edges[1:], np.mean(dens, axis=0)


def high_band_power(x, nu: float = NYQUIST) -> float:
    """Mean of ``|F|^2`` over the high band."""
    vals = []
    for ch in _channels(x):
        power = np.abs(dft2d(ch)) ** 2
        mask = high_band_mask(power.shape, nu)
        vals.append(power[mask].mean() if mask.any() else 0.0)
    return float(np.mean(vals))


def high_band_power_grad(channel, nu: float = NYQUIST) -> np.ndarray:
    """Gradient of :func:`high_band_power` for a single real channel."""
    x = _grid2d(channel)
    mask = high_band_mask(x.shape, nu)
    count = mask.sum()
    if count == 0:
        return np.zeros_like(x)
    masked = np.where(mask, dft2d(x), 0.0)
    # F = A x / (MN); d/dx sum |F|^2 = 2 Re(A^H F) / (MN) = 2 Re(ifft2(F))
    return 2.0 * np.real(np.fft.ifft2(masked)) / count


def dominant_frequency(channel):
    """Signed-frequency pair ``(|k/M|, |l/N|)`` of the strongest non-DC bin."""
    mag = np.abs(dft2d(channel))
    mag[0, 0] = -1.0
    k, l = np.unravel_index(int(np.argmax(mag)), mag.shape)
    return signed_frequencies(mag.shape[0])[k], signed_frequencies(mag.shape[1])[l], (k, l)
