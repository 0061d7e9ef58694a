import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import high_band_count, naive_aliasing_ratio, naive_dft2
from sfm.errors import DomainError
from sfm.spectral import (
    aliasing_ratio,
    dft2d,
    dominant_frequency,
    high_band_mask,
    high_band_power,
    high_band_power_grad,
    idft2d,
    lfr,
    lfr_curve,
    rdf,
    signed_frequencies,
)

# frozen from the oracles: 16x16, nu=1/4 -> 9 low bins per axis
HIGH_BINS_16 = 175
HF_COS_3_8_16 = 2 * 0.5**2 / HIGH_BINS_16


def row_cos(f, n=16):
    m = np.arange(n)
    return np.cos(2 * np.pi * f * m)[:, None] * np.ones((1, n))


def test_frozen_bin_count_matches_oracle():
    assert high_band_count(16, 16) == HIGH_BINS_16
    assert high_band_mask((16, 16)).sum() == HIGH_BINS_16


@pytest.mark.parametrize("shape", [(2, 2), (3, 5), (8, 8), (7, 4)])
def test_dft_matches_naive_oracle(shape):
    rng = np.random.default_rng(sum(shape))
    f = rng.standard_normal(shape)
    np.testing.assert_allclose(dft2d(f), naive_dft2(f), atol=1e-9)


def test_constant_spectrum():
    F = dft2d(np.full((6, 6), 2.5))
    assert F[0, 0] == pytest.approx(2.5, abs=1e-12)
    F[0, 0] = 0
    assert np.abs(F).max() < 1e-12


def test_cosine_quarter_bins():
    F = dft2d(row_cos(0.25))
    mag = np.abs(F)
    assert mag[4, 0] == pytest.approx(0.5, abs=1e-12)
    assert mag[12, 0] == pytest.approx(0.5, abs=1e-12)
    mag[4, 0] = mag[12, 0] = 0
    assert mag.max() < 1e-12


def test_parseval_and_inverse():
    rng = np.random.default_rng(0)
    f = rng.standard_normal((16, 16))
    F = dft2d(f)
    assert np.sum(f**2) == pytest.approx(f.size * np.sum(np.abs(F) ** 2), rel=1e-9)
    assert np.abs(idft2d(F) - f).max() <= 1e-9


def test_conjugate_symmetry():
    rng = np.random.default_rng(1)
    F = dft2d(rng.standard_normal((6, 8)))
    for k in range(6):
        for l in range(8):
            assert F[k, l] == pytest.approx(np.conj(F[-k % 6, -l % 8]), abs=1e-12)


def test_signed_frequencies():
    np.testing.assert_allclose(signed_frequencies(4), [0, 0.25, 0.5, 0.25])
    np.testing.assert_allclose(signed_frequencies(5), [0, 0.2, 0.4, 0.4, 0.2])


def test_boundary_bin_is_low_band():
    mask = high_band_mask((8, 8), 0.25)
    assert not mask[2, 0] and not mask[6, 0] and mask[3, 0]
    assert not mask[0, 0]


@pytest.mark.parametrize(
    "f,expected", [(3 / 8, 1.0), (1 / 8, 0.0)],
)
def test_aliasing_ratio_cosines(f, expected):
    x = row_cos(f)
    assert aliasing_ratio(x) == pytest.approx(expected, abs=1e-12)
    assert aliasing_ratio(x) == pytest.approx(naive_aliasing_ratio(x), abs=1e-9)


def test_aliasing_ratio_constant_and_zero():
    assert aliasing_ratio(np.full((8, 8), 3.0)) == pytest.approx(0.0, abs=1e-12)
    assert aliasing_ratio(np.zeros((8, 8))) == 0.0


def test_aliasing_ratio_matches_oracle_on_noise():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((8, 6))
    assert aliasing_ratio(x) == pytest.approx(naive_aliasing_ratio(x), abs=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 1e3), st.sampled_from([-1.0, 1.0]))
def test_aliasing_ratio_scale_invariant(seed, a, sign):
    x = np.random.default_rng(seed).standard_normal((8, 8))
    assert aliasing_ratio(sign * a * x) == pytest.approx(aliasing_ratio(x), abs=1e-12)


def test_multichannel_average():
    a, b = row_cos(3 / 8), row_cos(1 / 8)
    assert aliasing_ratio(np.stack([a, b])) == pytest.approx(0.5, abs=1e-12)


def test_lfr_examples():
    x = row_cos(3 / 8)
    assert lfr(x, 0.25) == pytest.approx(0.0, abs=1e-12)
    assert lfr(x, 0.45) == pytest.approx(1.0, abs=1e-12)
    assert lfr(np.full((8, 8), 1.0), 0.01) == 1.0
    assert lfr(x, 0.5 + 1e-9) == pytest.approx(1.0)
    with pytest.raises(DomainError):
        lfr(x, 0.0)


def test_lfr_monotone_on_noise():
    x = np.random.default_rng(3).standard_normal((16, 16))
    curve = lfr_curve(x, np.linspace(0.01, 0.5, 50))
    assert np.all(np.diff(curve) >= -1e-15)


def test_rdf_constant_map():
    edges, dens = rdf(np.full((8, 8), 1.0), 50)
    step = 0.5 / 50
    assert dens[0] == pytest.approx(1 / step)
    assert np.all(dens[1:] == 0)
    assert edges[-1] == 0.5


def test_rdf_single_cosine_in_its_bin():
    edges, dens = rdf(row_cos(3 / 8, 32), 50)
    nz = np.flatnonzero(dens > 1e-9)
    assert len(nz) == 1
    lo = edges[nz[0]] - 0.01
    assert lo <= 3 / 8 < edges[nz[0]]


def test_rdf_telescopes():
    x = np.random.default_rng(4).standard_normal((12, 12))
    edges, dens = rdf(x, 50)
    assert np.all(dens >= 0)
    assert dens.sum() * 0.01 == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(DomainError):
        rdf(x, 1)


def test_high_band_power_examples():
    assert high_band_power(np.full((8, 8), 4.0)) == pytest.approx(0.0, abs=1e-20)
    x = row_cos(3 / 8)
    assert high_band_power(x) == pytest.approx(HF_COS_3_8_16, rel=1e-12)
    assert high_band_power(2 * x) == pytest.approx(4 * HF_COS_3_8_16, rel=1e-12)


def test_high_band_power_grad_finite_difference():
    from oracles import central_difference

    x = np.random.default_rng(5).standard_normal((8, 8))
    num = central_difference(high_band_power, x)
    np.testing.assert_allclose(high_band_power_grad(x), num, rtol=1e-6, atol=1e-12)


def test_dominant_frequency():
    fk, fl, _ = dominant_frequency(row_cos(0.25).T)
    assert fk == 0 and abs(fl) == 0.25
