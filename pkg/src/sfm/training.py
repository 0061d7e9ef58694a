"""Toy end-to-end trainer: attention -> warp -> decimate -> heads ->
barycentric upsampling -> LPRM cascade, optimized with momentum SGD on
``L_seg + w.fm * L_FM + w.shf * L_SHF``."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import demod
from .attention import AttentionParams, attention_forward, attention_vjp
from .errors import ConfigError, DomainError, NumericalError
from .objective import (
    LossWeights,
    fm_loss,
    fm_loss_grad,
    poly_lr,
    seg_loss,
    seg_loss_grad,
    shf_loss,
    shf_loss_grad,
    shf_targets,
    total_loss,
)
from .scenes import SCENES, boundary_band, make_scene
from .spectral import NYQUIST, aliasing_ratio
from .tensor import atomic_write_text, decimate, decimate_vjp, read_tensor, sample_bilinear, sample_bilinear_vjp, write_tensor
from .warp import GaussianKernel, density, map_coordinates, map_coordinates_vjp

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("iter", "lr", "L_seg", "L_FM", "L_SHF", "L_total", "aliasing_ratio", "boundary_density_ratio")
REQUIRED_FIELDS = ("task", "iterations", "base_lr")


class TrainingDiverged(NumericalError):
    """Raised when the loss or a gradient stops being finite.

    ``params`` holds the last finite parameters and ``history`` the rows
    recorded before the failure.
    """

    def __init__(self, message, params, history):
        super().__init__(message)
        self.params = params
        self.history = history


@dataclass
class TrainConfig:
    task: str
    iterations: int
    base_lr: float
    seed: int = 0
    lambda_fm: float = LossWeights.fm
    lambda_shf: float = LossWeights.shf
    momentum: float = 0.9
    sigma: int | None = None
    stride: int = 2
    dilations: tuple = demod.DILATIONS
    comp_channels: int = 16
    kernel: int = 3
    generator: str = "daconv"
    refine_original: bool = False
    nyquist: float = NYQUIST
    size: int = 64

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        for name in REQUIRED_FIELDS:
            if name not in raw:
                raise ConfigError(f"config is missing required field {name!r}")
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
        cfg = cls(**raw)
        cfg.dilations = tuple(int(d) for d in cfg.dilations)
        cfg.validate()
        return cfg

    def validate(self):
        if self.task not in SCENES:
            raise ConfigError(f"task must be one of {sorted(SCENES)}, got {self.task!r}")
        if int(self.iterations) != self.iterations or self.iterations < 1:
            raise ConfigError("iterations must be a positive integer")
        if not self.base_lr > 0:
            raise ConfigError("base_lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.sigma is not None and (int(self.sigma) != self.sigma or self.sigma < 1):
            raise ConfigError("sigma must be an integer >= 1")
        if int(self.stride) != self.stride or self.stride < 2:
            raise ConfigError("stride must be an integer >= 2")
        if not self.dilations or any(d < 1 for d in self.dilations):
            raise ConfigError("dilations must be a non-empty list of positive integers")
        LossWeights(self.lambda_fm, self.lambda_shf)

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_fm, self.lambda_shf)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        out["dilations"] = list(self.dilations)
        return out


@dataclass
class ToyParams:
    attention: AttentionParams
    head_w: np.ndarray  # (K, C)
    head_b: np.ndarray  # (K,)
    comp_w: np.ndarray  # (P, C)
    comp_b: np.ndarray  # (P,)
    lprm: demod.LPRMParams

    @classmethod
    def init(cls, channels, num_classes, cfg: TrainConfig, rng: np.random.Generator):
        attn = AttentionParams.zeros(channels, cfg.kernel, cfg.generator)
        # a zero projection is a stationary point of the symmetric SHF term
        attn.proj += 0.1 * rng.standard_normal(attn.proj.shape)
        lprm = demod.LPRMParams.identity(cfg.comp_channels, cfg.dilations, strength=3.0)
        for w in lprm.weights:
            w += 0.01 * rng.standard_normal(w.shape)
        return cls(
            attention=attn,
            head_w=0.1 * rng.standard_normal((num_classes, channels)),
            head_b=np.zeros(num_classes),
            comp_w=0.5 * rng.standard_normal((cfg.comp_channels, channels)),
            comp_b=np.zeros(cfg.comp_channels),
            lprm=lprm,
        )

    def arrays(self) -> dict:
        """Flat name -> array view of every trainable tensor."""
        out = {
            "attention.daconv_raw": self.attention.daconv_raw,
            "attention.proj": self.attention.proj,
            "head.w": self.head_w,
            "head.b": self.head_b,
            "comp.w": self.comp_w,
            "comp.b": self.comp_b,
        }
        for s, (w, b) in enumerate(zip(self.lprm.weights, self.lprm.biases)):
            out[f"lprm.{s}.w"] = w
            out[f"lprm.{s}.b"] = b
        return out

    def copy(self) -> "ToyParams":
        return ToyParams(
            self.attention.copy(),
            self.head_w.copy(),
            self.head_b.copy(),
            self.comp_w.copy(),
            self.comp_b.copy(),
            self.lprm.copy(),
        )


@dataclass
class StepResult:
    seg: float
    fm: float
    shf: float
    total: float
    grid: np.ndarray
    modulated: np.ndarray
    grads: dict = field(default_factory=dict)


def _project(w, b, x):
    return np.tensordot(w, x, axes=(1, 0)) + b[:, None, None]


def evaluate(params: ToyParams, x, labels, target, cfg: TrainConfig, backward: bool = True) -> StepResult:
    """One forward pass, and optionally the backward pass, of the toy model."""
    h, w = x.shape[1:]
    kernel = GaussianKernel(cfg.sigma) if cfg.sigma else GaussianKernel.for_shape(h, w)
    weights = cfg.weights()

    trace = attention_forward(x, params.attention)
    grid = map_coordinates(trace.attention, kernel)
    xm = sample_bilinear(x, grid)
    low = decimate(xm, cfg.stride)
    glow = decimate(grid, cfg.stride)
    pred_low = _project(params.head_w, params.head_b, low)
    comp_low = _project(params.comp_w, params.comp_b, low)
    op = demod.nuu_operator(glow, h, w)
    pred = demod.nuu_upsample(pred_low, glow, h, w, op)
    comp = demod.nuu_upsample(comp_low, glow, h, w, op)
    out, ctrace = demod.lprm_cascade_forward(pred, comp, params.lprm, cfg.refine_original)

    seg = seg_loss(out, labels)
    fm = fm_loss(xm, cfg.nyquist)
    shf = shf_loss(grid, target)
    result = StepResult(seg, fm, shf, total_loss(seg, fm, shf, weights), grid, xm)
    if not backward:
        return result

    g_out = seg_loss_grad(out, labels)
    g_lprm, g_pred, g_comp = demod.lprm_cascade_vjp(params.lprm, ctrace, g_out, cfg.refine_original)
    g_pred_low = demod.nuu_upsample_vjp(op, g_pred, pred_low.shape)
    g_comp_low = np.zeros_like(comp_low) if g_comp is None else demod.nuu_upsample_vjp(op, g_comp, comp_low.shape)
    grads = {
        "head.w": np.tensordot(g_pred_low, low, axes=([1, 2], [1, 2])),
        "head.b": g_pred_low.sum(axis=(1, 2)),
        "comp.w": np.tensordot(g_comp_low, low, axes=([1, 2], [1, 2])),
        "comp.b": g_comp_low.sum(axis=(1, 2)),
    }
    g_low = np.tensordot(params.head_w, g_pred_low, axes=(0, 0)) + np.tensordot(params.comp_w, g_comp_low, axes=(0, 0))
    g_xm = decimate_vjp(g_low, cfg.stride, xm.shape) + weights.fm * fm_loss_grad(xm, cfg.nyquist)
    _, g_grid = sample_bilinear_vjp(x, grid, g_xm)
    g_grid = g_grid + weights.shf * shf_loss_grad(grid, target)
    g_attn = map_coordinates_vjp(trace.attention, kernel, g_grid)
    g_att, _ = attention_vjp(trace, params.attention, g_attn)
    grads["attention.daconv_raw"] = g_att["daconv_raw"]
    grads["attention.proj"] = g_att["proj"]
    for s, (gw, gb) in enumerate(zip(g_lprm["weights"], g_lprm["biases"])):
        grads[f"lprm.{s}.w"] = gw
        grads[f"lprm.{s}.b"] = gb
    result.grads = grads
    return result


def boundary_density_ratio(grid, labels, width: int = 1) -> float:
    """Mean sampling density where the sample lands on a class boundary,
    divided by the mean density everywhere else."""
    g = np.asarray(grid, dtype=np.float64)
    lab = np.asarray(labels)
    h, w = lab.shape
    band = boundary_band(lab, width)
    rows = np.rint(g[0] * (h - 1)).astype(int)
    cols = np.rint(g[1] * (w - 1)).astype(int)
    on = band[rows, cols]
    if on.all() or not on.any():
        return 1.0
    dens = density(g)
    return float(dens[on].mean() / dens[~on].mean())


@dataclass
class TrainResult:
    params: ToyParams
    history: list
    config: TrainConfig


def _finite(*values) -> bool:
    return all(np.all(np.isfinite(v)) for v in values)


def train_toy(config) -> TrainResult:
    """Train the toy model on a synthetic scene.

    ``config`` is a :class:`TrainConfig` or a dict accepted by
    :meth:`TrainConfig.from_dict`. Raises :class:`TrainingDiverged` if the
    loss or a gradient becomes non-finite.
    """
    cfg = config if isinstance(config, TrainConfig) else TrainConfig.from_dict(config)
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    scene = make_scene(cfg.task, seed=cfg.seed, size=cfg.size)
    x, labels = scene.features, scene.labels
    h, w = labels.shape
    kernel = GaussianKernel(cfg.sigma) if cfg.sigma else GaussianKernel.for_shape(h, w)
    target = shf_targets(labels, kernel, floor=0.1)

    params = ToyParams.init(x.shape[0], scene.num_classes, cfg, rng)
    # stages that cannot fit are dropped once here instead of warned about every step
    keep = demod.active_stages(params.lprm, h, w)
    params.lprm = demod.LPRMParams(
        [params.lprm.weights[s] for s in keep],
        [params.lprm.biases[s] for s in keep],
        tuple(params.lprm.dilations[s] for s in keep),
    )
    cfg_run = TrainConfig(**{**cfg.to_dict(), "dilations": params.lprm.dilations})

    velocity = {k: np.zeros_like(v) for k, v in params.arrays().items()}
    history = []
    last_good = params.copy()
    for it in range(cfg.iterations + 1):
        final = it == cfg.iterations
        lr = poly_lr(cfg.base_lr, it, cfg.iterations)
        try:
            step = evaluate(params, x, labels, target, cfg_run, backward=not final)
        except DomainError as exc:
            raise TrainingDiverged(f"iteration {it}: {exc}", last_good, history) from exc
        if not _finite(step.total, *step.grads.values()):
            raise TrainingDiverged(f"iteration {it}: loss or gradient is not finite", last_good, history)
        history.append(
            {
                "iter": it,
                "lr": lr,
                "L_seg": step.seg,
                "L_FM": step.fm,
                "L_SHF": step.shf,
                "L_total": step.total,
                "aliasing_ratio": aliasing_ratio(step.modulated, cfg.nyquist),
                "boundary_density_ratio": boundary_density_ratio(step.grid, labels),
            }
        )
        if final:
            break
        last_good = params.copy()
        arrays = params.arrays()
        for name, g in step.grads.items():
            v = velocity[name]
            v *= cfg.momentum
            v += g
            arrays[name] -= lr * v
    return TrainResult(params, history, cfg)


def history_csv(history) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=HISTORY_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in history:
        writer.writerow({k: (row[k] if k == "iter" else repr(float(row[k]))) for k in HISTORY_COLUMNS})
    return buf.getvalue()


# -- parameter bundles -------------------------------------------------------

BUNDLE_MANIFEST = "bundle.json"


def save_bundle(directory, params: ToyParams, config: TrainConfig | None = None) -> Path:
    """Write every array as ``<name>.sfmt`` plus a JSON manifest describing them."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    arrays = params.arrays()
    for name, arr in arrays.items():
        write_tensor(d / f"{name}.sfmt", np.atleast_1d(arr))
    manifest = {
        "format": "sfm-toy-bundle",
        "version": 1,
        "arrays": {name: list(np.shape(arr)) for name, arr in arrays.items()},
        "attention": {
            "generator": params.attention.generator,
            "bias": float(params.attention.bias),
            "bins": list(params.attention.bins),
        },
        "lprm_dilations": list(params.lprm.dilations),
        "config": config.to_dict() if config else None,
    }
    atomic_write_text(d / BUNDLE_MANIFEST, json.dumps(manifest, indent=2) + "\n")
    return d


def load_bundle(directory) -> ToyParams:
    d = Path(directory)
    try:
        manifest = json.loads((d / BUNDLE_MANIFEST).read_text())
    except FileNotFoundError:
        raise ConfigError(f"no {BUNDLE_MANIFEST} in {d}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"unreadable bundle manifest: {exc}") from None
    arrays = {}
    for name, shape in manifest["arrays"].items():
        arr = read_tensor(d / f"{name}.sfmt")
        if list(arr.shape) != list(shape):
            raise ConfigError(f"bundle array {name} has shape {arr.shape}, manifest says {shape}")
        arrays[name] = arr
    meta = manifest["attention"]
    attn = AttentionParams(
        daconv_raw=arrays["attention.daconv_raw"],
        proj=arrays["attention.proj"],
        bias=meta["bias"],
        generator=meta["generator"],
        bins=tuple(meta["bins"]),
    )
    dil = tuple(manifest["lprm_dilations"])
    lprm = demod.LPRMParams(
        [arrays[f"lprm.{s}.w"] for s in range(len(dil))],
        [arrays[f"lprm.{s}.b"] for s in range(len(dil))],
        dil,
    )
    return ToyParams(attn, arrays["head.w"], arrays["head.b"], arrays["comp.w"], arrays["comp.b"], lprm)
