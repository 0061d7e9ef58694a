"""Acceptance criteria, one test each. Every test prints a single
``PASS``/``FAIL`` line with the measured values and its runtime."""

import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from oracles import delaunay_violations, naive_dft2, signed_freq
from sfm.attention import (
    AttentionParams,
    attention_forward,
    attention_vjp,
    daconv,
    daconv_vjp,
    edge_attention,
    generate_attention,
    kernel_softmax,
    kernel_softmax_vjp,
)
from sfm.demod import (
    CENTER,
    LPRMParams,
    lprm_cascade_forward,
    lprm_refine,
    lprm_refine_vjp,
    lprm_relation,
    lprm_relation_vjp,
    msau,
    nuu_upsample,
)
from sfm.geometry import barycentric_weights, delaunay
from sfm.objective import (
    fm_loss,
    fm_loss_grad,
    grad_check,
    seg_loss,
    seg_loss_grad,
    shf_loss,
    shf_loss_grad,
    shf_targets,
    total_loss,
)
from sfm.scenes import make_scene
from sfm.spectral import aliasing_ratio, dominant_frequency, high_band_power
from sfm.tensor import decimate, sample_bilinear, sample_bilinear_vjp, upsample_bilinear
from sfm.training import history_csv, train_toy
from sfm.warp import GaussianKernel, map_coordinates, map_coordinates_vjp, modulate

TOL = 1e-4
TOL_SATURATED = 1e-3
SEEDS = range(10)


def verdict(number, title, checks, measured, started, budget=None):
    elapsed = time.perf_counter() - started
    if budget is not None:
        checks = {**checks, f"runtime < {budget:g} s": elapsed < budget}
    ok = all(checks.values())
    failed = [name for name, good in checks.items() if not good]
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {title} | {measured} | {elapsed:.2f} s"
    if failed:
        line += f" | failed: {'; '.join(failed)}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_criterion_1_frequency_scaling():
    t0 = time.perf_counter()
    j = np.arange(64)
    x = np.tile(np.cos(2 * np.pi * 0.4 * j), (64, 1))
    up = upsample_bilinear(x[None], 2, 128, 128)[0]
    fu, fv, _ = dominant_frequency(up)
    dominant = float(max(fu, fv))
    ar0, ar1 = aliasing_ratio(x), aliasing_ratio(up)
    verdict(
        1,
        "frequency scaling under x2 bilinear upsampling",
        {
            "dominant bin at 0.2 +- 1 bin": abs(dominant - 0.2) <= 1 / 128,
            "original aliasing ratio 1.0": abs(ar0 - 1.0) <= 1e-9,
            "upsampled aliasing ratio < 0.05": ar1 < 0.05,
        },
        f"dominant {dominant:.5f}, AR {ar0:.4f} -> {ar1:.4f}",
        t0,
        1.0,
    )


def test_criterion_2_aliasing_demo():
    t0 = time.perf_counter()
    j = np.arange(64)
    x = np.tile(np.cos(2 * np.pi * 3 / 8 * j), (64, 1))
    low = decimate(x[None], 2)[0]
    f_lib = tuple(float(f) for f in dominant_frequency(low)[:2])
    # the runtime budget covers the library path; the quadruple-loop oracle runs untimed
    lib_elapsed = time.perf_counter() - t0
    mag = np.abs(naive_dft2(low))
    mag[0, 0] = -1
    k, l = np.unravel_index(int(np.argmax(mag)), mag.shape)
    f_oracle = (float(abs(signed_freq(k, 32))), float(abs(signed_freq(l, 32))))
    verdict(
        2,
        "cosine at 3/8 decimated x2 aliases to 1/4",
        {
            "oracle bin is 1/4": f_oracle == (0.0, 0.25),
            "library agrees with oracle": f_lib == f_oracle,
            "bins are tied only by symmetry": np.isclose(mag[0, 8], mag[0, 24]) and mag[0, 8] > 10 * np.delete(mag[0], [8, 24]).max(),
            "library runtime < 1 s": lib_elapsed < 1.0,
        },
        f"oracle {f_oracle}, library {f_lib}, library time {lib_elapsed:.3f} s",
        t0,
    )


def test_criterion_3_modulation_reduces_aliasing():
    t0 = time.perf_counter()
    x = make_scene("texture", seed=0).features
    mod, _ = modulate(x, edge_attention(x))
    ar0, ar1 = aliasing_ratio(x), aliasing_ratio(mod)
    drop = 1 - ar1 / ar0
    verdict(
        3,
        "modulation reduces aliasing on the texture scene",
        {"relative drop >= 10%": drop >= 0.10},
        f"AR {ar0:.4f} -> {ar1:.4f} ({100 * drop:.1f}% lower)",
        t0,
        5.0,
    )


def _demod_vs_baseline(name):
    x = make_scene(name, seed=0).features
    h, w = x.shape[1:]
    mod, grid = modulate(x, edge_attention(x))
    demod = nuu_upsample(decimate(mod, 2), decimate(grid, 2), h, w)
    base = upsample_bilinear(decimate(x, 2), 2, h, w)
    return high_band_power(demod), high_band_power(base)


def test_criterion_4_demodulation_keeps_high_frequencies():
    t0 = time.perf_counter()
    res = {name: _demod_vs_baseline(name) for name in ("texture", "boundary")}
    verdict(
        4,
        "demodulated high-band power exceeds the bilinear baseline",
        {f"{n}: HF(demod) > HF(baseline)": d > b for n, (d, b) in res.items()},
        ", ".join(f"{n} {d:.3e} vs {b:.3e}" for n, (d, b) in res.items()),
        t0,
        10.0,
    )


def test_criterion_5_identity_chain():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 32, 32))
    mod, grid = modulate(x, np.full((32, 32), 1 / 1024))
    up = nuu_upsample(mod, grid, 32, 32)
    one_hot = np.zeros((9, 32, 32))
    one_hot[CENTER] = 1.0
    err_refine = np.abs(lprm_refine(up, one_hot) - x).max()
    out = msau(mod, mod, grid, 32, 32, LPRMParams.identity(4))
    err_msau = np.abs(out - x).max()
    verdict(
        5,
        "uniform attention chain reproduces the input",
        {"one-hot refine within 1e-9": err_refine <= 1e-9, "msau with identity cascade within 1e-9": err_msau <= 1e-9},
        f"max abs err {err_refine:.2e} (one-hot), {err_msau:.2e} (msau)",
        t0,
    )


def test_criterion_6_geometry_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    violations, bary_err = 0, 0.0
    for _ in range(100):
        pts = rng.random((int(rng.integers(16, 65)), 2))
        mesh = delaunay(pts)
        violations += len(delaunay_violations(mesh.vertices, mesh.triangles))
        for tri in mesh.triangles[:: max(1, len(mesh.triangles) // 8)]:
            corners = mesh.vertices[tri]
            q = rng.dirichlet(np.ones(3)) @ corners
            wts = barycentric_weights(corners, q)
            bary_err = max(bary_err, np.abs(wts @ corners - q).max(), abs(wts.sum() - 1))
    affine_err = 0.0
    for seed in range(10):
        r = np.random.default_rng(seed)
        grid = map_coordinates(r.random((16, 16)) + 0.05, GaussianKernel(2))
        a, b, c = r.standard_normal(3)
        out = nuu_upsample((a + b * grid[0] + c * grid[1])[None], grid, 21, 19)[0]
        uu, vv = np.meshgrid(np.linspace(0, 1, 21), np.linspace(0, 1, 19), indexing="ij")
        affine_err = max(affine_err, np.abs(out - (a + b * uu + c * vv)).max())
    verdict(
        6,
        "Delaunay, barycentric and affine reconstruction",
        {"no empty-circumcircle violations": violations == 0, "barycentric identity <= 1e-12": bary_err <= 1e-12, "affine field <= 1e-9": affine_err <= 1e-9},
        f"violations {violations}, barycentric err {bary_err:.1e}, affine err {affine_err:.1e}",
        t0,
    )


def _close(f, g, point, tol=TOL):
    return grad_check(f, g, point).max_rel_error, tol


def _grad_cases(seed):
    rng = np.random.default_rng(seed)
    out = {}

    x = rng.standard_normal((2, 8, 9))
    raw = rng.standard_normal((2, 3, 3))
    go = rng.standard_normal((2, 8, 9))
    out["daconv x"] = _close(lambda v: np.sum(daconv(v, kernel_softmax(raw)) * go), lambda v: daconv_vjp(v, kernel_softmax(raw), go)[0], x)
    out["daconv kernel"] = _close(
        lambda r: np.sum(daconv(x, kernel_softmax(r)) * go),
        lambda r: kernel_softmax_vjp(kernel_softmax(r), daconv_vjp(x, kernel_softmax(r), go)[1]),
        raw,
    )

    xa = rng.standard_normal((2, 8, 8))
    gs = rng.standard_normal((8, 8))
    prm = AttentionParams.zeros(2)
    prm.proj[:] = 0.5 * rng.standard_normal(prm.proj.shape)
    prm.daconv_raw[:] = rng.standard_normal(prm.daconv_raw.shape)
    out["attention proj"] = _close(
        lambda p: np.sum(generate_attention(xa, prm.copy(proj=p)) * gs),
        lambda p: attention_vjp(attention_forward(xa, prm.copy(proj=p)), prm.copy(proj=p), gs)[0]["proj"],
        prm.proj,
    )
    out["attention x"] = _close(
        lambda v: np.sum(generate_attention(v, prm) * gs), lambda v: attention_vjp(attention_forward(v, prm), prm, gs)[1], xa
    )

    attn = rng.random((12, 14)) + 0.2
    gg = rng.standard_normal((2, 12, 14))
    k = GaussianKernel(3)
    out["map_coordinates"] = _close(lambda a: np.sum(map_coordinates(a, k) * gg), lambda a: map_coordinates_vjp(a, k, gg), attn)

    xs = rng.standard_normal((2, 8, 9))
    while True:
        grid = rng.random((2, 6, 7))
        pu, pv = grid[0] * 7, grid[1] * 8
        if min(np.abs(pu - np.round(pu)).min(), np.abs(pv - np.round(pv)).min()) >= 1e-3:
            break
    gb = rng.standard_normal((2, 6, 7))
    out["bilinear x"] = _close(lambda v: np.sum(sample_bilinear(v, grid) * gb), lambda v: sample_bilinear_vjp(v, grid, gb)[0], xs)
    out["bilinear grid"] = _close(lambda q: np.sum(sample_bilinear(xs, q) * gb), lambda q: sample_bilinear_vjp(xs, q, gb)[1], grid)

    xc = rng.standard_normal((3, 7, 8))
    wt = 0.5 * rng.standard_normal((9, 3, 3, 3))
    bias = rng.standard_normal(9)
    y = rng.standard_normal((2, 7, 8))
    gl = rng.standard_normal((2, 7, 8))
    for d in (1, 2):

        def stage(xx=xc, ww=wt, yy=y, d=d):
            return np.sum(lprm_refine(yy, lprm_relation(xx, ww, bias, d), d) * gl)

        def stage_grads(xx=xc, ww=wt, yy=y, d=d):
            rel = lprm_relation(xx, ww, bias, d)
            g_y, g_r = lprm_refine_vjp(yy, rel, gl, d)
            g_x, g_w, _ = lprm_relation_vjp(xx, ww, rel, g_r, d)
            return g_x, g_w, g_y

        out[f"lprm d={d} comp"] = _close(lambda v: stage(xx=v), lambda v: stage_grads(xx=v)[0], xc)
        out[f"lprm d={d} weights"] = _close(lambda v: stage(ww=v), lambda v: stage_grads(ww=v)[1], wt)
        out[f"lprm d={d} pred"] = _close(lambda v: stage(yy=v), lambda v: stage_grads(yy=v)[2], y)

    m = rng.standard_normal((2, 8, 8))
    out["fm_loss"] = _close(fm_loss, fm_loss_grad, m)
    t = rng.random((2, 6, 7))
    gq = rng.random((2, 6, 7))
    out["shf_loss"] = _close(lambda q: shf_loss(q, t), lambda q: shf_loss_grad(q, t), gq)
    z = rng.standard_normal((4, 5, 6))
    lab = rng.integers(0, 4, (5, 6))
    out["seg_loss"] = _close(lambda v: seg_loss(v, lab), lambda v: seg_loss_grad(v, lab), z)
    return out


def test_criterion_7_gradient_suite():
    t0 = time.perf_counter()
    worst = {}
    for seed in SEEDS:
        for name, (err, tol) in _grad_cases(seed).items():
            prev = worst.get(name, (0.0, tol))
            worst[name] = (max(prev[0], err), tol)
    verdict(
        7,
        "analytic gradients match central differences (10 seeds)",
        {f"{n} <= {tol:g}": err <= tol for n, (err, tol) in worst.items()},
        f"{len(worst)} ops, worst rel err {max(e for e, _ in worst.values()):.1e}",
        t0,
        120.0,
    )


def test_criterion_8_toy_training():
    t0 = time.perf_counter()
    res = train_toy({"task": "boundary", "iterations": 200, "base_lr": 0.003, "seed": 0})
    elapsed_train = time.perf_counter() - t0
    first, last = res.history[0], res.history[-1]
    loss_ratio = last["L_total"] / first["L_total"]
    ar_ratio = last["aliasing_ratio"] / first["aliasing_ratio"]
    bdr = last["boundary_density_ratio"]
    short = {"task": "boundary", "iterations": 5, "base_lr": 0.003, "seed": 3, "size": 32}
    deterministic = history_csv(train_toy(short).history) == history_csv(train_toy(short).history)
    verdict(
        8,
        "toy training on the boundary task (200 iterations)",
        {
            "L_total <= 50% of initial": loss_ratio <= 0.5,
            "boundary density ratio > 1.2": bdr > 1.2,
            "aliasing ratio <= 80% of initial": ar_ratio <= 0.8,
            "bit-identical history per seed": deterministic,
            "training runtime < 300 s": elapsed_train < 300,
        },
        f"loss ratio {loss_ratio:.3f}, BDR {bdr:.3f}, AR ratio {ar_ratio:.3f}, training {elapsed_train:.1f} s",
        t0,
    )


def test_criterion_9_unit_identities():
    t0 = time.perf_counter()
    rng = np.random.default_rng(9)
    w = kernel_softmax(rng.standard_normal((3, 3, 3)))
    x = rng.standard_normal((2, 16, 16))
    prm = AttentionParams.zeros(2)
    prm.proj[:] = rng.standard_normal(prm.proj.shape)
    attn = generate_attention(x, prm)
    grid = map_coordinates(rng.random((16, 16)) + 0.1, GaussianKernel(3))
    labels = np.zeros((16, 16), int)
    labels[:, 8:] = 1
    target = shf_targets(labels)

    def corners_exact(g):
        return (
            np.all(g[0, 0, :] == 0) and np.all(g[0, -1, :] == 1) and np.all(g[1, :, 0] == 0) and np.all(g[1, :, -1] == 1)
        )

    pred = rng.standard_normal((3, 16, 16))
    comp = rng.standard_normal((4, 16, 16))
    params = LPRMParams.zeros(4, (1, 2, 4))
    for s in range(3):
        params.weights[s][:] = rng.standard_normal(params.weights[s].shape)
    out, _ = lprm_cascade_forward(pred, comp, params)
    lo = np.array([pred[c].min() for c in range(3)])[:, None, None]
    hi = np.array([pred[c].max() for c in range(3)])[:, None, None]
    total = total_loss(1.0, 2.0, 0.01)
    verdict(
        9,
        "unit identities",
        {
            "kernel softmax sums to 1": np.allclose(w.sum(axis=(1, 2)), 1, atol=1e-12),
            "attention sums to 1": abs(attn.sum() - 1) <= 1e-12,
            "grid corners exact": corners_exact(grid) and corners_exact(target),
            "total_loss example 2.02": abs(total - 2.02) <= 1e-12,
            "LPRM output within neighbourhood extrema": np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12),
        },
        f"total_loss {total!r}",
        t0,
    )
