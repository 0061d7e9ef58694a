import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sfm.attention import edge_attention, spatial_softmax
from sfm.errors import ConfigError, DomainError
from sfm.objective import grad_check
from sfm.ops import softmax_vjp
from sfm.scenes import make_scene
from sfm.spectral import aliasing_ratio
from sfm.tensor import identity_grid, sample_bilinear, sample_bilinear_vjp
from sfm.warp import GaussianKernel, check_grid, density, map_coordinates, map_coordinates_vjp, modulate, modulate_vjp

TOL = 1e-4


def delta_attention(n=9, eps=1e-3):
    a = np.full((n, n), eps)
    a[n // 2, n // 2] = 1.0
    return a / a.sum()


def test_kernel_properties():
    k = GaussianKernel(3)
    w = k.weights()
    assert k.size == 7 and w.shape == (7, 7)
    assert np.all(w > 0)
    np.testing.assert_array_equal(w, np.rot90(w))
    assert w[3, 3] == 1.0 and w[3, 6] == pytest.approx(np.exp(-0.5))
    assert GaussianKernel.for_shape(64, 48).radius == 8
    with pytest.raises(ConfigError):
        GaussianKernel(0)


@pytest.mark.parametrize("shape,r", [((9, 9), 2), ((16, 12), 3), ((5, 7), 4)])
def test_uniform_attention_gives_identity(shape, r):
    g = map_coordinates(np.ones(shape), GaussianKernel(r))
    np.testing.assert_allclose(g, identity_grid(*shape), atol=1e-9)


def test_delta_attention_pulls_toward_centre():
    g = map_coordinates(delta_attention(), GaussianKernel(2))
    ident = identity_grid(9, 9)
    assert g[0, 2, 2] > ident[0, 2, 2] and g[1, 2, 2] > ident[1, 2, 2]
    assert g[0, 6, 6] < ident[0, 6, 6]
    d = density(g)
    assert d[4, 4] > d[0, 0] and d[4, 4] > d[8, 8]


def test_corners_exact():
    rng = np.random.default_rng(0)
    g = map_coordinates(rng.random((10, 12)) + 0.01, GaussianKernel(2))
    assert g[0, 0, 0] == 0 and g[1, 0, 0] == 0
    assert g[0, -1, -1] == 1 and g[1, -1, -1] == 1
    assert np.all(g[0, 0] == 0) and np.all(g[0, -1] == 1) and np.all(g[1, :, 0] == 0) and np.all(g[1, :, -1] == 1)


def test_errors():
    with pytest.raises(ConfigError):
        map_coordinates(np.ones((4, 4)), GaussianKernel(4))
    with pytest.raises(DomainError):
        map_coordinates(np.zeros((6, 6)), GaussianKernel(1))
    with pytest.raises(DomainError):
        modulate(np.ones((1, 6, 6)), np.ones((5, 6)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 4), st.floats(0.1, 5.0))
def test_grid_invariants_random_attention(seed, r, spread):
    rng = np.random.default_rng(seed)
    attn = spatial_softmax(spread * rng.standard_normal((12, 12)))
    g = map_coordinates(attn, GaussianKernel(r))
    assert check_grid(g) == []


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.floats(1e-3, 1e3))
def test_scale_invariance(seed, c):
    attn = np.random.default_rng(seed).random((9, 10)) + 0.05
    k = GaussianKernel(2)
    np.testing.assert_allclose(map_coordinates(c * attn, k), map_coordinates(attn, k), atol=1e-12)


def test_modulate_examples():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((3, 10, 10))
    out, g = modulate(x, np.ones((10, 10)), GaussianKernel(2))
    np.testing.assert_allclose(out, x, atol=1e-9)
    const, _ = modulate(np.full((1, 10, 10), 4.0), rng.random((10, 10)) + 0.1, GaussianKernel(2))
    np.testing.assert_allclose(const, 4.0, atol=1e-12)


def test_checkerboard_right_modulation_reduces_aliasing():
    x = make_scene("texture").features
    out, _ = modulate(x, edge_attention(x))
    assert aliasing_ratio(out) < aliasing_ratio(x)


def test_density():
    np.testing.assert_allclose(density(identity_grid(8, 11)), 1.0, atol=1e-9)
    g = map_coordinates(edge_attention(make_scene("boundary").features), GaussianKernel(8))
    assert np.mean(1.0 / density(g)) == pytest.approx(1.0, abs=0.05)


def test_check_grid_reports_problems():
    g = identity_grid(5, 5)
    bad = g.copy()
    bad[0, 2, 2] = bad[0, 1, 2] - 0.1
    assert any("decreases" in p for p in check_grid(bad))
    bad = g.copy()
    bad[1, 0, -1] = 0.99
    assert any("covering" in p for p in check_grid(bad))


# -- gradients ---------------------------------------------------------------


@pytest.mark.parametrize("seed", range(10))
def test_map_coordinates_gradient_wrt_logits(seed):
    rng = np.random.default_rng(seed)
    logits0 = rng.standard_normal((9, 9))
    g_grid = rng.standard_normal((2, 9, 9))
    k = GaussianKernel(2)

    def f(z):
        return np.sum(map_coordinates(spatial_softmax(z), k) * g_grid)

    def grad(z):
        s = spatial_softmax(z)
        return softmax_vjp(s, map_coordinates_vjp(s, k, g_grid))

    rep = grad_check(f, grad, logits0)
    assert rep.ok(TOL), rep.max_rel_error


@pytest.mark.parametrize("seed", range(10))
def test_map_coordinates_gradient_larger_map(seed):
    rng = np.random.default_rng(100 + seed)
    attn = rng.random((12, 14)) + 0.2
    g_grid = rng.standard_normal((2, 12, 14))
    k = GaussianKernel(3)
    rep = grad_check(lambda a: np.sum(map_coordinates(a, k) * g_grid), lambda a: map_coordinates_vjp(a, k, g_grid), attn)
    assert rep.ok(TOL), rep.max_rel_error


def _grid_away_from_kinks(rng, h, w, shape):
    while True:
        g = rng.random((2,) + shape)
        pu, pv = g[0] * (h - 1), g[1] * (w - 1)
        if min(np.abs(pu - np.round(pu)).min(), np.abs(pv - np.round(pv)).min()) >= 1e-3:
            return g


@pytest.mark.parametrize("seed", range(10))
def test_bilinear_sampling_gradients(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 8, 9))
    grid = _grid_away_from_kinks(rng, 8, 9, (6, 7))
    go = rng.standard_normal((2, 6, 7))
    rep_x = grad_check(lambda v: np.sum(sample_bilinear(v, grid) * go), lambda v: sample_bilinear_vjp(v, grid, go)[0], x)
    rep_g = grad_check(lambda q: np.sum(sample_bilinear(x, q) * go), lambda q: sample_bilinear_vjp(x, q, go)[1], grid)
    assert rep_x.ok(TOL) and rep_g.ok(TOL)


def test_modulate_vjp_chains_to_attention():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 10, 10))
    attn = rng.random((10, 10)) + 0.5
    go = rng.standard_normal((1, 10, 10))
    k = GaussianKernel(2)

    def f(a):
        return np.sum(modulate(x, a, k)[0] * go)

    def grad(a):
        _, g = modulate(x, a, k)
        return map_coordinates_vjp(a, k, modulate_vjp(x, g, go)[1])

    assert grad_check(f, grad, attn).ok(1e-3)
