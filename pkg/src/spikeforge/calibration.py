"""Layer-wise SNN calibration: bias, initial-potential and weight updates,
plus the light/advanced pipeline that runs them greedily layer by layer.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .ann import ann_forward
from .errors import CalibrationDivergedError
from .graph import (
    ConvParams,
    LinearParams,
    NetworkGraph,
    rewrite_for_snn,
    spiking_units,
    validate_graph,
)
from .model_io import load_model, load_tensor_map, save_model, save_tensor_map
from .snn import clipfloor, expected_rate_forward
from .tensor import (
    DTYPE,
    batch_mean,
    channel_spatial_mean,
    check_tensor,
    conv2d_forward,
    conv2d_weight_grad,
    linear_forward,
    linear_weight_grad,
    relu,
)
from .thresholds import ThresholdTable, baseline_threshold, load_thresholds, mmse_threshold, save_thresholds


@dataclass
class PipelineConfig:
    """Knobs of the calibration pipeline; defaults follow the reference recipe."""

    mode: str = "light"  # light = bias only; advanced = potential + weights
    T: int = 32
    threshold_method: str = "mmse"  # mmse | mmse_channel | max | percentile
    threshold_n: int = 100
    percentile: float = 99.9
    bc_batch: int = 128
    wc_batch: int = 1024
    wc_iters: int = 5000
    wc_lr: float = 1e-5
    wc_momentum: float = 0.9
    lr_schedule: str = "cosine"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("light", "advanced"):
            raise ValueError(f"unknown pipeline mode {self.mode!r}")
        if self.threshold_method not in ("mmse", "mmse_channel", "max", "percentile"):
            raise ValueError(f"unknown threshold method {self.threshold_method!r}")
        if self.T < 1 or self.bc_batch < 1 or self.wc_batch < 1 or self.wc_iters < 0:
            raise ValueError("pipeline hyperparameters must be positive")
        if self.wc_lr <= 0 or not 0 <= self.wc_momentum < 1:
            raise ValueError("bad WC optimizer hyperparameters")
        if self.lr_schedule != "cosine":
            raise ValueError("only the cosine schedule is supported")


@dataclass
class CalibrationRecord:
    """Paired ANN/SNN outputs of one layer on the calibration batch."""

    layer_id: str
    x_next: np.ndarray  # ANN output of the unit
    s_next: np.ndarray  # SNN expected output of the unit
    e: np.ndarray = field(init=False)  # conversion error
    err_term: np.ndarray | None = None  # clipfloor(pre) - ReLU(pre)

    def __post_init__(self):
        if self.x_next.shape != self.s_next.shape:
            raise ValueError("x_next and s_next shapes differ")
        self.e = (self.x_next - self.s_next).astype(DTYPE)


def bias_calibrate(params, record: CalibrationRecord):
    """Add the mean conversion error to the bias, channel by channel.

    Returns (new params, applied delta). The delta is the batch+spatial mean
    for conv outputs and the per-feature batch mean for linear outputs.
    """
    delta = channel_spatial_mean(record.e, batch_reduce=True)
    new_bias = params.bias + delta
    if isinstance(params, ConvParams):
        return ConvParams(params.weight, new_bias, params.stride, params.padding, params.groups), delta
    return LinearParams(params.weight, new_bias), delta


def potential_calibrate(record: CalibrationRecord, T: int) -> np.ndarray:
    """Initial membrane potential v0 = T * mean-over-batch of the error.

    Keeps full per-neuron resolution (no spatial reduction).
    """
    return (DTYPE(int(T)) * batch_mean(record.e)).astype(DTYPE)


def _wc_forward(params, s_in: np.ndarray):
    if isinstance(params, ConvParams):
        return conv2d_forward(s_in, params)
    return linear_forward(s_in, params.weight, params.bias)


def _wc_grad(params, s_in: np.ndarray, grad_out: np.ndarray):
    if isinstance(params, ConvParams):
        return conv2d_weight_grad(s_in, grad_out, params)
    return linear_weight_grad(s_in, grad_out)


def _with_params(params, weight: np.ndarray, bias: np.ndarray):
    if isinstance(params, ConvParams):
        return ConvParams(weight, bias, params.stride, params.padding, params.groups)
    return LinearParams(weight, bias)


def wc_loss_and_grad(params, s_in, x_out, T, vth, v0, spiking: bool):
    """True squared-error loss plus the straight-through gradient.

    The reported loss uses the real clip-floor output. The gradient is that
    of the floor-removed surrogate (clip only): zero where the pre-clip value
    leaves [0, T], the plain conv/linear weight gradient inside.
    """
    z = _wc_forward(params, s_in)
    if spiking:
        y = clipfloor(z, T, vth, v0)
        vth_b = np.asarray(vth, dtype=np.float64)
        v0_b = np.asarray(v0, dtype=np.float64)
        if vth_b.ndim == 1:
            vth_b = vth_b.reshape((1, -1) + (1,) * (z.ndim - 2))
        if v0_b.ndim == z.ndim - 1:
            v0_b = v0_b[None]
        elif v0_b.ndim == 1 and z.ndim == 4:
            v0_b = v0_b.reshape(1, -1, 1, 1)
        u = (T * z.astype(np.float64) + v0_b) / vth_b
        surrogate = (vth_b / T) * np.clip(u, 0.0, float(T))
        mask = (u >= 0.0) & (u <= float(T))
        grad_z = (2.0 * (surrogate - x_out.astype(np.float64)) * mask).astype(DTYPE)
    else:
        y = z
        grad_z = (2.0 * (z.astype(np.float64) - x_out.astype(np.float64))).astype(DTYPE)
    loss = float(np.sum((y.astype(np.float64) - x_out.astype(np.float64)) ** 2))
    dw, db = _wc_grad(params, s_in, grad_z)
    return loss, dw, db


def weight_calibrate(
    params,
    s_bar_in: np.ndarray,
    x_ann_out: np.ndarray,
    cfg: PipelineConfig,
    vth=1.0,
    v0=0.0,
    spiking: bool = True,
    iters: int | None = None,
):
    """SGD with momentum and cosine decay on the squared conversion error.

    Returns (best params, report dict). Parameters with the lowest true loss
    seen across all iterations are returned, so the final loss never exceeds
    the initial one. A non-finite loss restores the originals and raises.
    """
    check_tensor(s_bar_in, name="s_bar_in")
    check_tensor(x_ann_out, name="x_ann_out")
    steps = cfg.wc_iters if iters is None else int(iters)
    weight = params.weight.copy()
    bias = params.bias.copy()
    vel_w = np.zeros_like(weight, dtype=np.float64)
    vel_b = np.zeros_like(bias, dtype=np.float64)

    current = _with_params(params, weight, bias)
    loss, dw, db = wc_loss_and_grad(current, s_bar_in, x_ann_out, cfg.T, vth, v0, spiking)
    if not math.isfinite(loss):
        raise CalibrationDivergedError("initial weight-calibration loss is not finite")
    best_loss, best_w, best_b = loss, weight.copy(), bias.copy()
    initial_loss = loss

    for step in range(steps):
        lr = cfg.wc_lr * 0.5 * (1.0 + math.cos(math.pi * step / max(steps, 1)))
        vel_w = cfg.wc_momentum * vel_w + dw.astype(np.float64)
        vel_b = cfg.wc_momentum * vel_b + db.astype(np.float64)
        with np.errstate(over="ignore", invalid="ignore"):
            weight = (weight.astype(np.float64) - lr * vel_w).astype(DTYPE)
            bias = (bias.astype(np.float64) - lr * vel_b).astype(DTYPE)
        if not (np.isfinite(weight).all() and np.isfinite(bias).all()):
            raise CalibrationDivergedError(
                f"weight calibration diverged at iteration {step + 1}; parameters restored"
            )
        current = _with_params(params, weight, bias)
        loss, dw, db = wc_loss_and_grad(current, s_bar_in, x_ann_out, cfg.T, vth, v0, spiking)
        if not math.isfinite(loss):
            raise CalibrationDivergedError(
                f"weight calibration diverged at iteration {step + 1}; parameters restored"
            )
        if loss < best_loss:
            best_loss, best_w, best_b = loss, weight.copy(), bias.copy()

    report = {"loss_initial": initial_loss, "loss_final": best_loss, "iters": steps}
    return _with_params(params, best_w, best_b), report


def param_hash(params) -> str:
    """Stable digest of a layer's weight and bias bytes."""
    digest = hashlib.sha256()
    digest.update(np.ascontiguousarray(params.weight).tobytes())
    digest.update(np.ascontiguousarray(params.bias).tobytes())
    return digest.hexdigest()


@dataclass
class CalibrationBundle:
    """Everything the calibrated SNN needs for one simulation length."""

    graph: NetworkGraph
    thresholds: ThresholdTable
    v0s: dict[str, np.ndarray]
    config: PipelineConfig
    report: dict


def _search_threshold(cfg: PipelineConfig, acts: np.ndarray):
    if cfg.threshold_method == "mmse":
        return mmse_threshold(acts, cfg.T, cfg.threshold_n, per_channel=False)
    if cfg.threshold_method == "mmse_channel":
        return mmse_threshold(acts, cfg.T, cfg.threshold_n, per_channel=True)
    if cfg.threshold_method == "max":
        return baseline_threshold(acts, method="max")
    return baseline_threshold(acts, method="percentile", p=cfg.percentile)


def select_calibration_samples(images: np.ndarray, count: int, seed: int) -> np.ndarray:
    """Deterministic seeded shuffle, then the first `count` samples."""
    if images.shape[0] < count:
        raise ValueError(f"dataset has {images.shape[0]} samples, need {count}")
    perm = np.random.default_rng(seed).permutation(images.shape[0])
    return np.ascontiguousarray(images[perm[:count]])


def run_pipeline(
    g: NetworkGraph,
    images: np.ndarray,
    cfg: PipelineConfig,
    bias_shift_hook=None,
) -> CalibrationBundle:
    """Fold BN, convert pools, then calibrate every layer greedily in order.

    Light mode adjusts biases only; advanced mode assigns initial potentials
    and then optimizes weights. Threshold search always runs first for each
    spiking layer. Earlier layers are frozen once calibrated.

    bias_shift_hook(layer_id, params, vth) -> params slots in an external
    pre-correction between threshold search and calibration; default none.
    """
    violations = validate_graph(g)
    if violations:
        raise ValueError(f"graph invalid: {violations}")
    work = rewrite_for_snn(g)
    calib_x = select_calibration_samples(images, cfg.wc_batch, cfg.seed)
    bc = slice(0, min(cfg.bc_batch, calib_x.shape[0]))

    _, trace = ann_forward(work, calib_x, capture=True)
    units = spiking_units(work)
    table = ThresholdTable(method=cfg.threshold_method, T=cfg.T, N=cfg.threshold_n, seed=cfg.seed)
    v0s: dict[str, np.ndarray] = {}
    layer_reports = []

    for unit in units:
        node = work.node(unit.op_id)
        x_out = trace.post[unit.op_id]
        z_ann = trace.pre[unit.op_id]
        vth = None
        if not unit.is_output:
            vth = _search_threshold(cfg, z_ann)
            table.set(unit.op_id, vth)
        if bias_shift_hook is not None:
            node.params = bias_shift_hook(unit.op_id, node.params, vth)

        rf = expected_rate_forward(work, table, v0s, calib_x, cfg.T, stop_after=unit.op_id)
        s_in = rf.inputs[unit.op_id]
        s_out = rf.logits if unit.is_output else rf.rates[unit.op_id]
        record = CalibrationRecord(unit.op_id, x_out[bc], s_out[bc])
        if not unit.is_output:
            record.err_term = (
                clipfloor(rf.pre[unit.op_id][bc], cfg.T, vth) - relu(rf.pre[unit.op_id][bc])
            ).astype(DTYPE)
        entry = {
            "layer": unit.op_id,
            "kind": node.kind,
            "e_norm_before": float(np.linalg.norm(record.e.astype(np.float64))),
        }

        if cfg.mode == "light":
            node.params, delta = bias_calibrate(node.params, record)
            entry["bias_delta"] = [float(d) for d in delta]
        else:
            if not unit.is_output:
                v0 = potential_calibrate(record, cfg.T)
                v0s[unit.op_id] = v0
                entry["v0_norm"] = float(np.linalg.norm(v0.astype(np.float64)))
            node.params, wc_report = weight_calibrate(
                node.params,
                s_in,
                x_out,
                cfg,
                vth=vth if vth is not None else 1.0,
                v0=v0s.get(unit.op_id, 0.0),
                spiking=not unit.is_output,
            )
            entry.update(wc_report)

        rf_after = expected_rate_forward(work, table, v0s, calib_x, cfg.T, stop_after=unit.op_id)
        s_after = rf_after.logits if unit.is_output else rf_after.rates[unit.op_id]
        entry["e_norm_after"] = float(
            np.linalg.norm((x_out[bc] - s_after[bc]).astype(np.float64))
        )
        entry["param_hash"] = param_hash(node.params)
        layer_reports.append(entry)

    report = {
        "mode": cfg.mode,
        "T": cfg.T,
        "seed": cfg.seed,
        "threshold_method": cfg.threshold_method,
        "layers": layer_reports,
    }
    return CalibrationBundle(graph=work, thresholds=table, v0s=v0s, config=cfg, report=report)


def save_bundle(bundle: CalibrationBundle, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    save_model(bundle.graph, os.path.join(out_dir, "model.sfm"))
    save_thresholds(bundle.thresholds, os.path.join(out_dir, "thresholds.json"))
    save_tensor_map(bundle.v0s, os.path.join(out_dir, "v0.sfb"))
    manifest = {
        "config": {k: getattr(bundle.config, k) for k in vars(bundle.config)},
        "report": bundle.report,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_bundle(bundle_dir) -> CalibrationBundle:
    graph = load_model(os.path.join(bundle_dir, "model.sfm"))
    table = load_thresholds(os.path.join(bundle_dir, "thresholds.json"))
    v0s = load_tensor_map(os.path.join(bundle_dir, "v0.sfb"))
    with open(os.path.join(bundle_dir, "manifest.json"), "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    cfg = PipelineConfig(**manifest["config"])
    return CalibrationBundle(
        graph=graph, thresholds=table, v0s=v0s, config=cfg, report=manifest["report"]
    )
