"""Diagnostics: conversion-error reports, layer-error propagation bound,
firing sparsity and the event-driven energy estimate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ann import ActivationTrace
from .graph import ConvParams, NetworkGraph, spiking_units
from .snn import RateForward, SimulationResult, clipfloor, _param_view
from .tensor import DTYPE, channel_spatial_mean, conv2d_forward, linear_forward, relu

ENERGY_PER_ADD = 0.9  # energy cost per accumulate operation, arbitrary units
ENERGY_PER_MULT = 4.6  # energy cost per multiply operation, arbitrary units


@dataclass
class LayerErrorReport:
    """Conversion-error summary for one layer on one batch."""

    layer_id: str
    e_norm: float  # Frobenius norm of x - s_bar
    mean_abs_channel_error: float  # mean |mu_c(e)| over channels
    floor_count: int  # interior elements with a fractional quantization step
    clip_count: int  # elements saturated by the clip
    total: int
    terminal_violation_fraction: float | None = None  # v(T) outside [0, vth)


def layer_error(
    trace: ActivationTrace,
    rf: RateForward,
    thresholds,
    T: int,
    v0s: dict | None = None,
    sim: SimulationResult | None = None,
) -> list[LayerErrorReport]:
    """Per-layer error report; floor/clip split follows the rate predictor."""
    reports = []
    for layer_id, s_bar in rf.rates.items():
        x = trace.post[layer_id]
        if x.shape != s_bar.shape:
            raise ValueError(f"{layer_id}: ANN and SNN shapes differ")
        e = (x.astype(np.float64) - s_bar.astype(np.float64))
        pre = rf.pre[layer_id]
        vth_b = _param_view(thresholds.values_for(layer_id), pre.ndim)
        v0_b = _param_view(v0s.get(layer_id, 0.0) if v0s else 0.0, pre.ndim)
        u = (int(T) * pre.astype(np.float64) + v0_b) / vth_b
        upper = u >= float(T)
        lower = u < 0.0
        interior = ~(upper | lower)
        fractional = interior & (np.floor(u) != u)
        violation = None
        if sim is not None and layer_id in sim.terminal_v:
            v_term = sim.terminal_v[layer_id].astype(np.float64)
            bad = (v_term < 0.0) | (v_term >= _param_view(sim.thresholds[layer_id], v_term.ndim))
            violation = float(np.mean(bad))
        reports.append(
            LayerErrorReport(
                layer_id=layer_id,
                e_norm=float(np.linalg.norm(e)),
                mean_abs_channel_error=float(
                    np.mean(np.abs(channel_spatial_mean(e.astype(DTYPE))))
                ),
                floor_count=int(np.sum(fractional)),
                clip_count=int(np.sum(upper | lower)),
                total=int(u.size),
                terminal_violation_fraction=violation,
            )
        )
    return reports


def _linear_chain(g: NetworkGraph) -> list:
    """Node sequence of a pure chain graph; None when the graph branches."""
    if any(n.kind == "Add" for n in g.nodes):
        return None
    return list(g.nodes)


def error_propagation_bound(
    g: NetworkGraph,
    trace: ActivationTrace,
    rf: RateForward,
    thresholds,
    T: int,
    v0s: dict | None = None,
) -> dict:
    """Numerically evaluate both sides of the layer-error propagation bound.

    lhs = ||x_in - s_bar_in|| at the output layer. rhs applies the later
    layers' weights (bias-free, ReLU removed) to each layer's quantization
    residual ReLU(pre) - clipfloor(pre) and takes the norm of the sum.
    Reported, never asserted.
    """
    if _linear_chain(g) is None:
        return {"skipped": "graph contains Add nodes; diagnostic needs a chain"}
    units = spiking_units(g)
    out_unit = units[-1]
    lhs_ann = trace.post[g.node(out_unit.op_id).inputs[0]]
    lhs_snn = rf.inputs[out_unit.op_id]
    lhs = float(np.linalg.norm(lhs_ann.astype(np.float64) - lhs_snn.astype(np.float64)))

    hidden = [u for u in units if not u.is_output]
    err_norms = {}
    total = None
    for idx, unit in enumerate(hidden):
        pre = rf.pre[unit.op_id]
        vth = thresholds.values_for(unit.op_id)
        v0 = v0s.get(unit.op_id, 0.0) if v0s else 0.0
        err = relu(pre).astype(np.float64) - clipfloor(pre, T, vth, v0).astype(np.float64)
        err_norms[unit.op_id] = float(np.linalg.norm(err))
        carried = err.astype(DTYPE)
        for later in hidden[idx + 1 :]:
            carried = _apply_unit_linear(g, later.op_id, carried)
        carried = _reshape_like(g, out_unit.op_id, carried)
        total = carried.astype(np.float64) if total is None else total + carried.astype(np.float64)
    rhs = float(np.linalg.norm(total)) if total is not None else 0.0
    return {
        "lhs": lhs,
        "rhs": rhs,
        "ratio": lhs / rhs if rhs > 0 else None,
        "err_norms": err_norms,
    }


def _apply_unit_linear(g: NetworkGraph, op_id: str, value: np.ndarray) -> np.ndarray:
    """Apply a unit's linear map (zero bias) to a carried error tensor."""
    node = g.node(op_id)
    value = _reshape_like(g, op_id, value)
    if node.kind == "Conv":
        p: ConvParams = node.params
        zero = ConvParams(p.weight, np.zeros_like(p.bias), p.stride, p.padding, p.groups)
        return conv2d_forward(value.astype(DTYPE), zero)
    return linear_forward(
        value.astype(DTYPE), node.params.weight, np.zeros_like(node.params.bias)
    )


def _reshape_like(g: NetworkGraph, op_id: str, value: np.ndarray) -> np.ndarray:
    """Flatten the carried tensor when the unit consumes flattened input."""
    node = g.node(op_id)
    src = g.node(node.inputs[0])
    while src.kind in ("ReLU",):
        src = g.node(src.inputs[0])
    if src.kind == "Flatten" and value.ndim > 2:
        return value.reshape(value.shape[0], -1)
    return value


def firing_rate_stats(result: SimulationResult) -> dict[str, dict[str, float]]:
    """Per-layer firing ratios (spikes per neuron-step), mean/min/max.

    The mean divides exact integer totals so independent recounts agree
    bit-for-bit.
    """
    stats = {}
    for layer_id, counts in result.counts.items():
        ratio = counts.astype(np.float64) / result.T
        stats[layer_id] = {
            "mean": float(int(counts.sum())) / float(counts.size * result.T),
            "min": float(np.min(ratio)),
            "max": float(np.max(ratio)),
        }
    return stats


def _conv_fanout(shape: tuple[int, int, int], p: ConvParams) -> np.ndarray:
    """Per-input-neuron count of consumer MACs, excluding padded positions."""
    c, h, w = shape
    oh, ow = p.out_hw(h, w)
    og = p.out_channels // p.groups

    def axis_counts(extent, out_extent, k, stride, pad):
        counts = np.zeros(extent, dtype=np.int64)
        for pos in range(extent):
            lo = max(0, -(-(pos + pad - k + 1) // stride))  # ceil division
            hi = min(out_extent - 1, (pos + pad) // stride)
            counts[pos] = max(0, hi - lo + 1)
        return counts

    nh = axis_counts(h, oh, p.weight.shape[2], p.stride[0], p.padding[0])
    nw = axis_counts(w, ow, p.weight.shape[3], p.stride[1], p.padding[1])
    per_pos = np.outer(nh, nw) * og
    return np.broadcast_to(per_pos[None, :, :], (c, h, w)).astype(np.float64)


def _consumer_units(g: NetworkGraph, op_id: str) -> list[str]:
    """Conv/Linear units reached from op_id through ReLU/Flatten/Add nodes."""
    found = []
    stack = [op_id]
    while stack:
        for consumer in g.consumers(stack.pop()):
            if consumer.kind in ("Conv", "Linear"):
                found.append(consumer.id)
            elif consumer.kind in ("ReLU", "Flatten", "Add"):
                stack.append(consumer.id)
    return found


def _ann_mac_count(g: NetworkGraph, shapes: dict[str, tuple[int, ...]]) -> int:
    """Per-sample multiply-accumulate count, padded taps excluded."""
    total = 0
    for node in g.nodes:
        if node.kind == "Linear":
            total += node.params.weight.shape[0] * node.params.weight.shape[1]
        elif node.kind == "Conv":
            p: ConvParams = node.params
            _, h, w = shapes[node.inputs[0]]
            oh, ow = p.out_hw(h, w)
            kh, kw = p.weight.shape[2], p.weight.shape[3]

            def taps(out_extent, k, stride, pad, extent):
                tot = 0
                for o in range(out_extent):
                    start = o * stride - pad
                    tot += min(extent - 1, start + k - 1) - max(0, start) + 1
                return tot

            th = taps(oh, kh, p.stride[0], p.padding[0], h)
            tw = taps(ow, kw, p.stride[1], p.padding[1], w)
            total += th * tw * (p.in_channels // p.groups) * p.out_channels
    return total


def energy_estimate(result: SimulationResult, g: NetworkGraph) -> dict:
    """Event-driven SNN energy vs dense ANN energy, in cost units.

    snn = add-energy * sum over spikes of the firing neuron's synaptic
    fan-out; ann = (add+mult energy) * MAC count. Both are per sample.
    """
    from .graph import infer_shapes

    shapes = infer_shapes(g)
    batch = next(iter(result.counts.values())).shape[0] if result.counts else 1
    snn_ops = 0.0
    per_layer = {}
    for layer_id, counts in result.counts.items():
        shape = shapes[layer_id]
        fanout = None
        for consumer_id in _consumer_units(g, layer_id):
            node = g.node(consumer_id)
            if node.kind == "Conv":
                piece = _conv_fanout(shape, node.params)
            else:
                piece = np.full(shape, node.params.weight.shape[0], dtype=np.float64)
                piece = piece.reshape(shape)
            fanout = piece if fanout is None else fanout + piece
        if fanout is None:
            fanout = np.zeros(shape, dtype=np.float64)
        if counts.ndim == fanout.ndim + 1:
            layer_ops = float(np.sum(counts.astype(np.float64) * fanout[None]))
        else:
            layer_ops = float(np.sum(counts.astype(np.float64) * fanout))
        per_layer[layer_id] = layer_ops / batch
        snn_ops += layer_ops
    snn_energy = ENERGY_PER_ADD * snn_ops / batch
    ann_energy = (ENERGY_PER_ADD + ENERGY_PER_MULT) * _ann_mac_count(g, shapes)
    return {
        "snn_energy": snn_energy,
        "ann_energy": float(ann_energy),
        "ratio": snn_energy / ann_energy if ann_energy else None,
        "per_layer_synaptic_ops": per_layer,
        "units": "cost units per sample",
    }
