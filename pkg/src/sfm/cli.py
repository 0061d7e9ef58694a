"""Batch command-line front end.

Subcommands ``analyze``, ``spectrum``, ``roundtrip`` and ``train`` emit JSON or CSV and
exit with 0 on success, 2 on usage or input errors, 3 on numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import demod
from .attention import edge_attention, generate_attention
from .errors import ConfigError, DomainError, FormatError, NumericalError
from .spectral import NYQUIST, aliasing_ratio, high_band_power, lfr_curve, rdf
from .tensor import atomic_write_text, decimate, load_input, upsample_bilinear, write_tensor
from .warp import GaussianKernel, check_grid, modulate

log = logging.getLogger("sfm")

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 2, 3
LFR_POINTS = 50
RDF_BINS = 50


class UsageError(Exception):
    pass


def _dilations(text: str) -> tuple:
    try:
        vals = tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"dilations must be comma-separated integers, got {text!r}") from None
    if not vals or any(v < 1 for v in vals):
        raise argparse.ArgumentTypeError("dilations must be positive")
    return vals


def _positive_int(minimum: int):
    def parse(text: str) -> int:
        try:
            val = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
        if val < minimum:
            raise argparse.ArgumentTypeError(f"must be >= {minimum}, got {val}")
        return val

    return parse


def _json(obj) -> str:
    return json.dumps(obj, indent=2, allow_nan=False) + "\n"


def _centered(x: np.ndarray, keep_mean: bool) -> np.ndarray:
    return x if keep_mean else x - x.mean(axis=(1, 2), keepdims=True)


# -- analyze -----------------------------------------------------------------


def analyze_map(x: np.ndarray, nu: float = NYQUIST, keep_mean: bool = False) -> dict:
    """Spectral report of a ``(C, H, W)`` map."""
    xc = _centered(x, keep_mean)
    xis = np.linspace(0.5 / LFR_POINTS, 0.5, LFR_POINTS)
    curve = lfr_curve(xc, xis)
    edges, dens = rdf(xc, RDF_BINS)
    return {
        "shape": list(x.shape),
        "nyquist": nu,
        "mean_removed": not keep_mean,
        "aliasing_ratio": aliasing_ratio(xc, nu),
        "high_band_power": high_band_power(xc, nu),
        "lfr": [[float(a), float(b)] for a, b in zip(xis, curve)],
        "rdf": [[float(a), float(b)] for a, b in zip(edges, dens)],
        "channels": [
            {
                "channel": c,
                "mean": float(x[c].mean()),
                "aliasing_ratio": aliasing_ratio(xc[c], nu),
                "high_band_power": high_band_power(xc[c], nu),
            }
            for c in range(x.shape[0])
        ],
    }


def cmd_analyze(args) -> int:
    def one(path):
        report = {"input": str(path), **analyze_map(load_input(path), args.nyquist, args.keep_mean)}
        if args.output_dir:
            atomic_write_text(Path(args.output_dir) / f"{Path(path).stem}.analysis.json", _json(report))
        return report

    reports = _map_inputs(one, args.input)
    for report in reports:
        sys.stdout.write(_json(report) if len(reports) == 1 else json.dumps(report, allow_nan=False) + "\n")
    return EXIT_OK


def cmd_spectrum(args) -> int:
    def one(path):
        full = analyze_map(load_input(path), args.nyquist, args.keep_mean)
        report = {k: full[k] for k in ("aliasing_ratio", "lfr", "rdf")}
        if args.output_dir:
            atomic_write_text(Path(args.output_dir) / f"{Path(path).stem}.spectrum.json", _json(report))
        return report

    reports = _map_inputs(one, args.input)
    for report in reports:
        sys.stdout.write(_json(report) if len(reports) == 1 else json.dumps(report, allow_nan=False) + "\n")
    return EXIT_OK


# -- roundtrip ---------------------------------------------------------------


def _attention(x: np.ndarray, mode: str):
    """Returns ``(attention, bundle_params_or_None)``."""
    h, w = x.shape[1:]
    if mode == "uniform":
        return np.full((h, w), 1.0 / (h * w)), None
    if mode == "laplacian":
        return edge_attention(x), None
    if mode.startswith("trained:"):
        from .training import load_bundle

        params = load_bundle(mode.split(":", 1)[1])
        if params.attention.proj.shape[0] != 5 * x.shape[0]:
            raise ConfigError(
                f"trained attention expects {params.attention.proj.shape[0] // 5} channel(s), input has {x.shape[0]}"
            )
        return generate_attention(x, params.attention), params
    raise UsageError(f"unknown attention mode {mode!r}; use uniform, laplacian or trained:<path>")


def roundtrip_map(x: np.ndarray, mode: str = "laplacian", sigma=None, stride: int = 2, nu: float = NYQUIST, keep_mean: bool = False):
    """Modulate, decimate and demodulate ``x``.

    Returns ``(report, tensors)`` where ``tensors`` maps output names to
    arrays. ``reconstructed`` demodulates the full-resolution modulated map
    (the exact inverse check); ``demodulated`` starts from the decimated one.
    """
    h, w = x.shape[1:]
    kernel = GaussianKernel(sigma) if sigma else GaussianKernel.for_shape(h, w)
    attn, bundle = _attention(x, mode)
    modulated, grid = modulate(x, attn, kernel)
    low = decimate(modulated, stride)
    glow = decimate(grid, stride)
    op = demod.nuu_operator(glow, h, w)
    demodulated = demod.nuu_upsample(low, glow, h, w, op)
    if bundle is not None and bundle.lprm.dilations:
        comp_low = np.tensordot(bundle.comp_w, low, axes=(1, 0)) + bundle.comp_b[:, None, None]
        comp = demod.nuu_upsample(comp_low, glow, h, w, op)
        demodulated, _ = demod.lprm_cascade_forward(demodulated, comp, bundle.lprm)
    reconstructed = demod.nuu_upsample(modulated, grid, h, w)
    baseline = upsample_bilinear(decimate(x, stride), stride, h, w)
    tensors = {
        "modulated": modulated,
        "decimated": low,
        "demodulated": demodulated,
        "baseline": baseline,
        "grid": grid,
    }
    for name, arr in tensors.items():
        if not np.all(np.isfinite(arr)):
            raise NumericalError(f"{name} tensor is not finite")
    maps = {"original": x, "modulated": modulated, "baseline": baseline, "demodulated": demodulated}
    report = {
        "shape": list(x.shape),
        "attention": mode,
        "sigma": kernel.radius,
        "stride": stride,
        "nyquist": nu,
        "mean_removed": not keep_mean,
        "aliasing_ratio": {k: aliasing_ratio(_centered(v, keep_mean), nu) for k, v in maps.items()},
        "high_band_power": {k: high_band_power(_centered(v, keep_mean), nu) for k, v in maps.items()},
        "max_abs_err": float(np.abs(reconstructed - x).max()),
        "max_abs_err_demodulated": float(np.abs(demodulated - x).max()),
        "max_abs_err_baseline": float(np.abs(baseline - x).max()),
        "grid_problems": check_grid(grid),
    }
    return report, tensors


def cmd_roundtrip(args) -> int:
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    def one(path):
        x = load_input(path)
        report, tensors = roundtrip_map(x, args.attention, args.sigma, args.stride, args.nyquist, args.keep_mean)
        report = {"input": str(path), **report}
        dest = out if len(args.input) == 1 else out / Path(path).stem
        dest.mkdir(parents=True, exist_ok=True)
        for name, arr in tensors.items():
            write_tensor(dest / f"{name}.sfmt", arr)
        atomic_write_text(dest / "report.json", _json(report))
        return report

    reports = _map_inputs(one, args.input)
    for report in reports:
        sys.stdout.write(_json(report) if len(reports) == 1 else json.dumps(report, allow_nan=False) + "\n")
    return EXIT_OK


def _map_inputs(fn, paths):
    if len(paths) == 1:
        return [fn(paths[0])]
    with ThreadPoolExecutor(max_workers=min(4, len(paths))) as pool:
        return list(pool.map(fn, paths))


# -- train -------------------------------------------------------------------


def _load_config(args) -> dict:
    try:
        raw = json.loads(Path(args.config).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {args.config}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise UsageError("config must be a JSON object")
    overrides = {
        "seed": args.seed,
        "lambda_fm": args.lambda_fm,
        "lambda_shf": args.lambda_shf,
        "sigma": args.sigma,
        "stride": args.stride,
        "dilations": list(args.dilations) if args.dilations else None,
        "nyquist": args.nyquist,
    }
    raw.update({k: v for k, v in overrides.items() if v is not None})
    return raw


def _write_bundle_atomic(directory: Path, params, cfg) -> None:
    from .training import save_bundle

    tmp = Path(tempfile.mkdtemp(dir=directory.parent, prefix=f".{directory.name}."))
    try:
        save_bundle(tmp, params, cfg)
        if directory.exists():
            shutil.rmtree(directory)
        os.replace(tmp, directory)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def cmd_train(args) -> int:
    from .training import TrainConfig, TrainingDiverged, history_csv, train_toy

    cfg = TrainConfig.from_dict(_load_config(args))
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        result = train_toy(cfg)
    except TrainingDiverged as exc:
        atomic_write_text(out / "history.csv", history_csv(exc.history))
        _write_bundle_atomic(out / "params", exc.params, cfg)
        raise
    atomic_write_text(out / "history.csv", history_csv(result.history))
    _write_bundle_atomic(out / "params", result.params, cfg)
    first, last = result.history[0], result.history[-1]
    summary = {
        "iterations": cfg.iterations,
        "initial": {k: first[k] for k in ("L_total", "aliasing_ratio", "boundary_density_ratio")},
        "final": {k: last[k] for k in ("L_total", "aliasing_ratio", "boundary_density_ratio")},
        "history": str(out / "history.csv"),
        "params": str(out / "params"),
    }
    sys.stdout.write(_json(summary))
    return EXIT_OK


# -- entry point -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sfm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, nyquist=True):
        if nyquist:
            p.add_argument("--nyquist", type=float, default=NYQUIST, help="high-band threshold (default 0.25)")
        p.add_argument("--seed", type=int, default=None, help="seed for every random draw")

    p = sub.add_parser("analyze", help="aliasing ratio, LFR and RDF of a tensor or PGM")
    p.add_argument("--input", action="append", required=True, help="SFMT tensor or P5 PGM (repeatable)")
    p.add_argument("--output-dir", help="also write <stem>.analysis.json here")
    p.add_argument("--keep-mean", action="store_true", help="do not subtract the per-channel mean first")
    common(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("spectrum", help="aliasing ratio, LFR and RDF only")
    p.add_argument("--input", action="append", required=True, help="SFMT tensor or P5 PGM (repeatable)")
    p.add_argument("--output-dir", help="also write <stem>.spectrum.json here")
    p.add_argument("--keep-mean", action="store_true", help="do not subtract the per-channel mean first")
    common(p)
    p.set_defaults(func=cmd_spectrum)

    p = sub.add_parser("roundtrip", help="modulate, decimate and demodulate an input")
    p.add_argument("--input", action="append", required=True, help="SFMT tensor or P5 PGM (repeatable)")
    p.add_argument("--output-dir", required=True)
    p.add_argument("--attention", default="laplacian", help="uniform | laplacian | trained:<bundle dir>")
    p.add_argument("--sigma", type=_positive_int(1), default=None, help="Gaussian window radius (default max(H,W)/8)")
    p.add_argument("--stride", type=_positive_int(2), default=2)
    p.add_argument("--keep-mean", action="store_true", help="do not subtract the per-channel mean before spectra")
    common(p)
    p.set_defaults(func=cmd_roundtrip)

    p = sub.add_parser("train", help="train the toy model from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--output-dir", required=True)
    p.add_argument("--sigma", type=_positive_int(1), default=None)
    p.add_argument("--stride", type=_positive_int(2), default=None)
    p.add_argument("--dilations", type=_dilations, default=None, help="comma-separated (default 1,2,4,8,16,32,64)")
    p.add_argument("--lambda-fm", type=float, default=None, help="weight of the FM loss (default 0.01)")
    p.add_argument("--lambda-shf", type=float, default=None, help="weight of the SHF loss (default 100)")
    p.add_argument("--nyquist", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"sfm: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (UsageError, ConfigError, DomainError, FormatError, OSError) as exc:
        print(f"sfm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
