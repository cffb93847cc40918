"""Reference ANN forward pass with per-layer activation capture."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import UnfoldedBatchNormError
from .graph import NetworkGraph, spiking_units
from .tensor import avg_pool2d, check_tensor, conv2d_forward, linear_forward, relu


@dataclass
class ActivationTrace:
    """Captured values from one forward pass.

    pre holds each Conv/Linear node's own output (the pre-activation z);
    post holds, for every node, its unit output after the attached ReLU when
    one exists, i.e. the x the next layer consumes.
    """

    pre: dict[str, np.ndarray] = field(default_factory=dict)
    post: dict[str, np.ndarray] = field(default_factory=dict)


def ann_forward(
    g: NetworkGraph, x: np.ndarray, capture: bool = False
) -> tuple[np.ndarray, ActivationTrace | None]:
    """Evaluate the graph on a batch; BatchNorm must be folded beforehand.

    Returns raw logits (no ReLU on the last layer unless the graph says so)
    and, when capture is set, the full activation trace.
    """
    check_tensor(x, name="network input")
    values: dict[str, np.ndarray] = {}
    trace = ActivationTrace() if capture else None
    for node in g.nodes:
        if node.kind == "Input":
            values[node.id] = x
        elif node.kind == "BatchNorm":
            raise UnfoldedBatchNormError(f"{node.id}: fold BatchNorm before running the ANN")
        elif node.kind == "Conv":
            values[node.id] = conv2d_forward(values[node.inputs[0]], node.params)
        elif node.kind == "Linear":
            values[node.id] = linear_forward(
                values[node.inputs[0]], node.params.weight, node.params.bias
            )
        elif node.kind == "AvgPool":
            values[node.id] = avg_pool2d(
                values[node.inputs[0]], node.params.kernel, node.params.stride
            )
        elif node.kind == "ReLU":
            values[node.id] = relu(values[node.inputs[0]])
        elif node.kind == "Flatten":
            src = values[node.inputs[0]]
            values[node.id] = src.reshape(src.shape[0], -1)
        elif node.kind == "Add":
            values[node.id] = values[node.inputs[0]] + values[node.inputs[1]]
        elif node.kind == "Output":
            values[node.id] = values[node.inputs[0]]
        else:
            raise ValueError(f"unhandled node kind {node.kind}")
    logits = values[g.output_node().id]
    if capture:
        trace.post.update(values)
        for node in g.nodes:
            if node.kind in ("Conv", "Linear"):
                trace.pre[node.id] = values[node.id]
        for unit in _units_or_none(g) or []:
            if unit.relu_id is not None:
                trace.post[unit.op_id] = values[unit.relu_id]
    return logits, trace


def _units_or_none(g: NetworkGraph):
    try:
        return spiking_units(g)
    except Exception:
        return None


def unit_io(trace: ActivationTrace, g: NetworkGraph):
    """Per spiking unit: (ANN input, pre-activation, post-activation output)."""
    out = []
    for unit in spiking_units(g):
        op = g.node(unit.op_id)
        out.append(
            (
                unit,
                trace.post[op.inputs[0]],
                trace.pre[unit.op_id],
                trace.post[unit.op_id],
            )
        )
    return out
