"""Network graph: layer nodes, inference-time rewrites, and validation.

A NetworkGraph is an ordered DAG over a fixed node vocabulary (Input, Conv,
Linear, BatchNorm, AvgPool, ReLU, Add, Flatten, Output). Rewrites never
mutate; they return new graphs.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .errors import UnsupportedTopologyError
from .tensor import DTYPE, ConvParams, check_tensor

KINDS = ("Input", "Output", "Conv", "Linear", "BatchNorm", "AvgPool", "ReLU", "Add", "Flatten")


@dataclass
class LinearParams:
    weight: np.ndarray  # [O, I]
    bias: np.ndarray  # [O]

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=DTYPE)
        self.bias = np.asarray(self.bias, dtype=DTYPE)
        check_tensor(self.weight, rank=2, name="linear weight")
        check_tensor(self.bias, rank=1, name="linear bias")
        if self.bias.shape[0] != self.weight.shape[0]:
            raise ValueError("linear bias length != output features")


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5

    def __post_init__(self):
        arrs = {}
        for name in ("gamma", "beta", "running_mean", "running_var"):
            arr = np.asarray(getattr(self, name), dtype=DTYPE)
            check_tensor(arr, rank=1, name=name)
            arrs[name] = arr
            setattr(self, name, arr)
        lengths = {a.shape[0] for a in arrs.values()}
        if len(lengths) != 1:
            raise ValueError("batchnorm per-channel arrays must share one length")
        self.epsilon = float(self.epsilon)
        if np.any(arrs["running_var"] + self.epsilon <= 0):
            raise ValueError("running_var + epsilon must be positive")


@dataclass
class AvgPoolParams:
    kernel: tuple[int, int]
    stride: tuple[int, int]

    def __post_init__(self):
        self.kernel = (int(self.kernel[0]), int(self.kernel[1]))
        self.stride = (int(self.stride[0]), int(self.stride[1]))
        if self.kernel[0] < 1 or self.kernel[1] < 1:
            raise ValueError("avgpool kernel extents must be >= 1")
        if self.stride[0] < 1 or self.stride[1] < 1:
            raise ValueError("avgpool stride extents must be >= 1")


@dataclass
class LayerNode:
    id: str
    kind: str
    inputs: list[str] = field(default_factory=list)
    params: object = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown node kind {self.kind!r}")


@dataclass
class NetworkGraph:
    nodes: list[LayerNode]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self._index = {n.id: n for n in self.nodes}
        if len(self._index) != len(self.nodes):
            raise ValueError("duplicate node ids")
        # Keep metadata JSON-plain so save/load round trips compare equal.
        if "input_shape" in self.metadata:
            self.metadata["input_shape"] = [int(d) for d in self.metadata["input_shape"]]

    def node(self, node_id: str) -> LayerNode:
        return self._index[node_id]

    def consumers(self, node_id: str) -> list[LayerNode]:
        return [n for n in self.nodes if node_id in n.inputs]

    def input_node(self) -> LayerNode:
        return next(n for n in self.nodes if n.kind == "Input")

    def output_node(self) -> LayerNode:
        return next(n for n in self.nodes if n.kind == "Output")

    def copy(self) -> "NetworkGraph":
        return NetworkGraph(nodes=copy.deepcopy(self.nodes), metadata=dict(self.metadata))

    def __eq__(self, other):
        if not isinstance(other, NetworkGraph):
            return NotImplemented
        if self.metadata != other.metadata or len(self.nodes) != len(other.nodes):
            return False
        for a, b in zip(self.nodes, other.nodes):
            if (a.id, a.kind, a.inputs) != (b.id, b.kind, b.inputs):
                return False
            if not _params_equal(a.params, b.params):
                return False
        return True


def _params_equal(a, b) -> bool:
    if type(a) is not type(b):
        return False
    if a is None:
        return True
    for name in vars(a):
        va, vb = getattr(a, name), getattr(b, name)
        if isinstance(va, np.ndarray):
            if va.shape != vb.shape or not np.array_equal(va, vb):
                return False
        elif va != vb:
            return False
    return True


def infer_shapes(g: NetworkGraph) -> dict[str, tuple[int, ...]]:
    """Propagate per-sample shapes from Input to Output.

    Returns a map node id -> shape without the batch dimension. Raises
    ValueError on inconsistent geometry.
    """
    input_shape = tuple(int(d) for d in g.metadata["input_shape"])
    shapes: dict[str, tuple[int, ...]] = {}
    for node in g.nodes:
        if node.kind == "Input":
            shapes[node.id] = input_shape
            continue
        src = [shapes[i] for i in node.inputs]
        if node.kind == "Conv":
            p: ConvParams = node.params
            c, h, w = src[0]
            if c != p.in_channels:
                raise ValueError(f"{node.id}: input channels {c} != {p.in_channels}")
            oh, ow = p.out_hw(h, w)
            shapes[node.id] = (p.out_channels, oh, ow)
        elif node.kind == "Linear":
            lp: LinearParams = node.params
            if len(src[0]) != 1 or src[0][0] != lp.weight.shape[1]:
                raise ValueError(f"{node.id}: input features {src[0]} != {lp.weight.shape[1]}")
            shapes[node.id] = (lp.weight.shape[0],)
        elif node.kind == "BatchNorm":
            if src[0][0] != node.params.gamma.shape[0]:
                raise ValueError(f"{node.id}: channels {src[0][0]} != {node.params.gamma.shape[0]}")
            shapes[node.id] = src[0]
        elif node.kind == "AvgPool":
            ap: AvgPoolParams = node.params
            c, h, w = src[0]
            if h < ap.kernel[0] or w < ap.kernel[1] or (h - ap.kernel[0]) % ap.stride[0] or (
                w - ap.kernel[1]
            ) % ap.stride[1]:
                raise ValueError(f"{node.id}: pool geometry invalid for input {src[0]}")
            shapes[node.id] = (
                c,
                (h - ap.kernel[0]) // ap.stride[0] + 1,
                (w - ap.kernel[1]) // ap.stride[1] + 1,
            )
        elif node.kind == "Flatten":
            shapes[node.id] = (int(np.prod(src[0])),)
        elif node.kind in ("ReLU", "Output"):
            shapes[node.id] = src[0]
        elif node.kind == "Add":
            if src[0] != src[1]:
                raise ValueError(f"{node.id}: add inputs {src[0]} vs {src[1]} differ")
            shapes[node.id] = src[0]
        else:
            raise ValueError(f"unhandled kind {node.kind}")
    return shapes


_ARITY = {"Input": 0, "Add": 2}


def validate_graph(g: NetworkGraph) -> list[str]:
    """Check structural invariants; returns human-readable violations."""
    violations: list[str] = []
    seen: set[str] = set()
    n_input = sum(1 for n in g.nodes if n.kind == "Input")
    n_output = sum(1 for n in g.nodes if n.kind == "Output")
    if n_input != 1:
        violations.append(f"graph must have exactly one Input node, found {n_input}")
    if n_output != 1:
        violations.append(f"graph must have exactly one Output node, found {n_output}")
    for node in g.nodes:
        expected = _ARITY.get(node.kind, 1)
        if len(node.inputs) != expected:
            violations.append(
                f"{node.id}: {node.kind} takes {expected} input(s), has {len(node.inputs)}"
            )
        for src in node.inputs:
            if src not in seen:
                violations.append(f"{node.id}: input {src!r} does not precede it")
        seen.add(node.id)
    if "input_shape" not in g.metadata:
        violations.append("metadata missing input_shape")
    if violations:
        return violations
    try:
        infer_shapes(g)
    except (ValueError, KeyError) as exc:
        violations.append(f"shape propagation failed: {exc}")
    return violations


def fold_batchnorm(g: NetworkGraph) -> NetworkGraph:
    """Fuse every (Conv|Linear, BatchNorm) pair into the preceding layer.

    New weight = weight * gamma / sqrt(var + eps) per output channel; new bias
    = beta + (bias - mean) * gamma / sqrt(var + eps).
    """
    out = g.copy()
    keep: list[LayerNode] = []
    rename: dict[str, str] = {}
    for node in out.nodes:
        if node.kind != "BatchNorm":
            node.inputs = [rename.get(i, i) for i in node.inputs]
            keep.append(node)
            continue
        pred_id = rename.get(node.inputs[0], node.inputs[0])
        pred = next((n for n in keep if n.id == pred_id), None)
        if pred is None or pred.kind not in ("Conv", "Linear"):
            raise UnsupportedTopologyError(
                f"{node.id}: BatchNorm predecessor must be Conv or Linear"
            )
        if len(g.consumers(node.inputs[0])) != 1:
            raise UnsupportedTopologyError(
                f"{node.id}: cannot fold, predecessor {pred_id} has other consumers"
            )
        bn: BatchNormParams = node.params
        sigma = np.sqrt(bn.running_var.astype(np.float64) + bn.epsilon)
        scale = bn.gamma.astype(np.float64) / sigma
        if pred.kind == "Conv":
            p: ConvParams = pred.params
            new_w = (p.weight.astype(np.float64) * scale[:, None, None, None]).astype(DTYPE)
            new_b = (
                bn.beta.astype(np.float64)
                + (p.bias.astype(np.float64) - bn.running_mean.astype(np.float64)) * scale
            ).astype(DTYPE)
            pred.params = ConvParams(new_w, new_b, p.stride, p.padding, p.groups)
        else:
            lp: LinearParams = pred.params
            new_w = (lp.weight.astype(np.float64) * scale[:, None]).astype(DTYPE)
            new_b = (
                bn.beta.astype(np.float64)
                + (lp.bias.astype(np.float64) - bn.running_mean.astype(np.float64)) * scale
            ).astype(DTYPE)
            pred.params = LinearParams(new_w, new_b)
        rename[node.id] = pred_id
    return NetworkGraph(nodes=keep, metadata=out.metadata)


def avgpool_to_depthwise(g: NetworkGraph) -> NetworkGraph:
    """Replace each AvgPool node with an equivalent depthwise Conv node."""
    shapes = infer_shapes(g)
    out = g.copy()
    for idx, node in enumerate(out.nodes):
        if node.kind != "AvgPool":
            continue
        ap: AvgPoolParams = node.params
        channels = shapes[node.inputs[0]][0]
        kh, kw = ap.kernel
        value = DTYPE(1.0) / DTYPE(kh * kw)
        weight = np.full((channels, 1, kh, kw), value, dtype=DTYPE)
        bias = np.zeros(channels, dtype=DTYPE)
        out.nodes[idx] = LayerNode(
            id=node.id,
            kind="Conv",
            inputs=list(node.inputs),
            params=ConvParams(weight, bias, stride=ap.stride, padding=(0, 0), groups=channels),
        )
    return NetworkGraph(nodes=out.nodes, metadata=out.metadata)


def rewrite_for_snn(g: NetworkGraph) -> NetworkGraph:
    """Fold BatchNorm, then convert AvgPool; the standard pre-conversion pass."""
    return avgpool_to_depthwise(fold_batchnorm(g))


@dataclass
class SpikingUnit:
    """A Conv/Linear node plus the ReLU it drives, as seen by the SNN engines.

    Every unit except the last carries IF neurons; the last one accumulates
    raw pre-synaptic input into the network output.
    """

    op_id: str
    relu_id: str | None
    is_output: bool


def output_op_id(g: NetworkGraph) -> str:
    """Conv/Linear node that produces the logits (reached through Flatten only)."""
    node = g.node(g.output_node().inputs[0])
    while node.kind == "Flatten":
        node = g.node(node.inputs[0])
    if node.kind not in ("Conv", "Linear"):
        raise UnsupportedTopologyError(
            f"output must be fed by a Conv/Linear (through Flatten only), got {node.kind}"
        )
    return node.id


def spiking_units(g: NetworkGraph) -> list[SpikingUnit]:
    """Enumerate Conv/Linear units in topological order for a rewritten graph."""
    for node in g.nodes:
        if node.kind == "BatchNorm":
            raise UnsupportedTopologyError("fold BatchNorm before deriving spiking units")
        if node.kind == "AvgPool":
            raise UnsupportedTopologyError("convert AvgPool before deriving spiking units")
    out_id = output_op_id(g)
    units = []
    for node in g.nodes:
        if node.kind not in ("Conv", "Linear"):
            continue
        relu_id = next(
            (c.id for c in g.consumers(node.id) if c.kind == "ReLU"),
            None,
        )
        units.append(SpikingUnit(node.id, relu_id, node.id == out_id))
    if not units or not units[-1].is_output:
        raise UnsupportedTopologyError("logits layer must be the last Conv/Linear node")
    return units


def normalize_thresholds(g: NetworkGraph, thresholds) -> tuple[NetworkGraph, object]:
    """Rescale weights so every spiking layer can use a unit threshold.

    For spiking layer l with scalar threshold V_l fed by spikes of amplitude
    V_{l-1} (V_0 = 1 for the analog input): W <- W * V_{l-1} / V_l and
    b <- b / V_l. The logits layer uses V_n = 1 so its accumulated output is
    unchanged. Per-step spike indicators are preserved.
    """
    from .thresholds import ThresholdTable

    units = spiking_units(g)
    out = g.copy()
    scale_of: dict[str, float] = {}
    new_values: dict[str, float] = {}
    for unit in units:
        node = out.node(unit.op_id)
        if unit.is_output:
            v_this = 1.0
        else:
            values = thresholds.values_for(unit.op_id)
            if np.ndim(values) != 0:
                raise ValueError("normalize_thresholds requires per-layer scalar thresholds")
            v_this = float(values)
            if v_this <= 0:
                raise ValueError(f"{unit.op_id}: threshold must be positive, got {v_this}")
        preds = _spiking_predecessors(g, unit.op_id, scale_of)
        v_prev = preds.pop() if preds else 1.0
        if preds:
            raise UnsupportedTopologyError(
                f"{unit.op_id}: predecessors carry unequal thresholds, cannot normalize"
            )
        ratio = np.float64(v_prev) / np.float64(v_this)
        if node.kind == "Conv":
            p: ConvParams = node.params
            node.params = ConvParams(
                (p.weight.astype(np.float64) * ratio).astype(DTYPE),
                (p.bias.astype(np.float64) / np.float64(v_this)).astype(DTYPE),
                p.stride,
                p.padding,
                p.groups,
            )
        else:
            lp: LinearParams = node.params
            node.params = LinearParams(
                (lp.weight.astype(np.float64) * ratio).astype(DTYPE),
                (lp.bias.astype(np.float64) / np.float64(v_this)).astype(DTYPE),
            )
        scale_of[unit.op_id] = v_this
        if not unit.is_output:
            new_values[unit.op_id] = 1.0
    table = ThresholdTable(
        method="normalized",
        T=thresholds.T,
        N=thresholds.N,
        seed=thresholds.seed,
        values=new_values,
    )
    return out, table


def _spiking_predecessors(g: NetworkGraph, op_id: str, scale_of: dict[str, float]) -> set[float]:
    """Thresholds of the spiking layers whose spikes reach op_id's inputs."""
    found: set[float] = set()
    stack = list(g.node(op_id).inputs)
    while stack:
        node = g.node(stack.pop())
        if node.kind == "Input":
            found.add(1.0)
        elif node.kind in ("Conv", "Linear"):
            found.add(scale_of[node.id])
        else:
            stack.extend(node.inputs)
    return found
