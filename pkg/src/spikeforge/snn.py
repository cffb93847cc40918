"""Spiking side: IF dynamics with soft reset, multi-step simulation, and the
closed-form clip-floor rate predictor.

Simulation uses direct input encoding (the first layer sees the analog input
every step) and an accumulating, never-firing output layer. Membrane state
accumulates in float64 internally so closed-form comparisons stay exact;
everything exposed is float32.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import StaleStateError
from .graph import NetworkGraph, SpikingUnit, spiking_units
from .tensor import DTYPE, check_tensor, conv2d_forward, linear_forward


def _param_view(param, ndim: int):
    """Broadcast a per-layer scalar / per-channel vector / per-neuron tensor."""
    arr = np.asarray(param, dtype=np.float64)
    if arr.ndim == 0:
        return arr
    if arr.ndim == 1 and ndim == 4:
        return arr.reshape(1, -1, 1, 1)
    if arr.ndim == ndim - 1:
        return arr[None]
    if arr.ndim == ndim:
        return arr
    raise ValueError(f"cannot broadcast parameter of rank {arr.ndim} to data rank {ndim}")


def clipfloor(x: np.ndarray, T: int, vth, v0=0.0) -> np.ndarray:
    """Expected IF rate for pre-activation x: (vth/T) * clip(floor(T*x/vth + v0/vth), 0, T).

    vth may be a scalar or per-channel vector; v0 a scalar, per-channel vector
    or per-neuron tensor (initial membrane potential).
    """
    check_tensor(x, name="clipfloor input")
    T = int(T)
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    vth_b = _param_view(vth, x.ndim)
    if np.any(vth_b <= 0):
        raise ValueError("threshold must be positive")
    v0_b = _param_view(v0, x.ndim)
    u = (T * x.astype(np.float64) + v0_b) / vth_b
    m = np.clip(np.floor(u), 0.0, float(T))
    return ((vth_b / T) * m).astype(DTYPE)


@dataclass
class LayerState:
    """Membrane bookkeeping for one spiking layer."""

    threshold: object  # positive scalar or per-channel vector
    v0: object = 0.0  # initial potential: scalar or per-neuron tensor
    v: np.ndarray | None = None  # materialized per-sample potentials (float64)

    def materialize(self, like: np.ndarray) -> None:
        v0_b = _param_view(self.v0, like.ndim)
        self.v = np.zeros(like.shape, dtype=np.float64) + v0_b


@dataclass
class SpikingState:
    """Per-layer membrane state for one simulation run."""

    layers: dict[str, LayerState]
    armed: bool = True


def init_state(g: NetworkGraph, thresholds, v0s: dict | None = None) -> SpikingState:
    """Build a reset state from a threshold table and optional v0 map."""
    layers = {}
    for unit in spiking_units(g):
        if unit.is_output:
            continue
        vth = thresholds.values_for(unit.op_id)
        if np.any(np.asarray(vth) <= 0):
            raise ValueError(f"{unit.op_id}: threshold must be positive")
        v0 = 0.0
        if v0s is not None and unit.op_id in v0s:
            v0 = v0s[unit.op_id]
        layers[unit.op_id] = LayerState(threshold=vth, v0=v0)
    return SpikingState(layers=layers, armed=True)


def reset_state(state: SpikingState) -> None:
    """Drop membrane potentials back to v0 and re-arm the state."""
    for layer in state.layers.values():
        layer.v = None
    state.armed = True


def if_layer_step(layer: LayerState, drive: np.ndarray) -> np.ndarray:
    """One IF step with soft reset: fire where v + drive >= vth, subtract spikes."""
    check_tensor(drive, name="drive")
    if layer.v is None:
        layer.materialize(drive)
    if layer.v.shape != drive.shape:
        raise ValueError(f"drive shape {drive.shape} != state shape {layer.v.shape}")
    vth_b = _param_view(layer.threshold, drive.ndim)
    v_temp = layer.v + drive.astype(np.float64)
    fired = v_temp >= vth_b
    spikes = np.where(fired, vth_b, 0.0)
    layer.v = v_temp - spikes
    return spikes.astype(DTYPE)


@dataclass
class SimulationResult:
    """Spike counts, expected rates and accumulated output of one run."""

    T: int
    counts: dict[str, np.ndarray]  # per spiking layer, int32, [N, ...]
    rates: dict[str, np.ndarray]  # s_bar = vth * m / T, float32
    thresholds: dict[str, object]
    output_sum: np.ndarray  # accumulated pre-synaptic input at the output layer
    output_rate: np.ndarray  # output_sum / T, comparable to ANN logits
    terminal_v: dict[str, np.ndarray]  # v(T), float32
    trains: dict[str, np.ndarray] | None = None  # [T, N, ...] spike amplitudes


def _unit_drive(g: NetworkGraph, unit: SpikingUnit, value: np.ndarray) -> np.ndarray:
    node = g.node(unit.op_id)
    if node.kind == "Conv":
        return conv2d_forward(value, node.params)
    return linear_forward(value, node.params.weight, node.params.bias)


def _static_nodes(g: NetworkGraph, unit_ids: set[str]) -> set[str]:
    """Nodes whose value never changes across steps (no spiking layer upstream)."""
    static: set[str] = set()
    for node in g.nodes:
        if node.kind == "Input":
            static.add(node.id)
        elif node.id in unit_ids:
            continue  # spiking output; drive may be static but value is not
        elif node.inputs and all(i in static for i in node.inputs):
            static.add(node.id)
    return static


def simulate_snn(
    g: NetworkGraph,
    state: SpikingState,
    x: np.ndarray,
    T: int,
    record: bool = False,
    threads: int = 1,
) -> SimulationResult:
    """Run the spiking network for T steps on a batch of analog inputs."""
    check_tensor(x, name="network input")
    T = int(T)
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not state.armed:
        raise StaleStateError("spiking state was not reset before simulation")
    state.armed = False

    units = spiking_units(g)
    for unit in units:
        if not unit.is_output and unit.op_id not in state.layers:
            raise ValueError(f"{unit.op_id}: no threshold in state")

    if threads > 1 and x.shape[0] > 1:
        return _simulate_parallel(g, state, x, T, record, threads)
    return _simulate_batch(g, state, x, T, record)


def _simulate_parallel(g, state, x, T, record, threads):
    n = x.shape[0]
    chunks = np.array_split(np.arange(n), min(threads, n))
    chunks = [c for c in chunks if len(c)]

    def run(idx):
        sub = SpikingState(
            layers={
                k: LayerState(threshold=ls.threshold, v0=ls.v0) for k, ls in state.layers.items()
            }
        )
        return _simulate_batch(g, sub, np.ascontiguousarray(x[idx]), T, record)

    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        parts = list(pool.map(run, chunks))

    first = parts[0]
    for key in state.layers:
        state.layers[key].v = np.concatenate(
            [p.terminal_v[key].astype(np.float64) for p in parts]
        )
    merged = SimulationResult(
        T=T,
        counts={k: np.concatenate([p.counts[k] for p in parts]) for k in first.counts},
        rates={k: np.concatenate([p.rates[k] for p in parts]) for k in first.rates},
        thresholds=first.thresholds,
        output_sum=np.concatenate([p.output_sum for p in parts]),
        output_rate=np.concatenate([p.output_rate for p in parts]),
        terminal_v={k: np.concatenate([p.terminal_v[k] for p in parts]) for k in first.terminal_v},
        trains=(
            {k: np.concatenate([p.trains[k] for p in parts], axis=1) for k in first.trains}
            if record
            else None
        ),
    )
    return merged


def _simulate_batch(g, state, x, T, record) -> SimulationResult:
    units = spiking_units(g)
    unit_by_id = {u.op_id: u for u in units}
    static = _static_nodes(g, set(unit_by_id))
    static_values: dict[str, np.ndarray] = {}
    static_drives: dict[str, np.ndarray] = {}

    counts: dict[str, np.ndarray] = {}
    trains: dict[str, list[np.ndarray]] = {u.op_id: [] for u in units if not u.is_output}
    output_sum: np.ndarray | None = None
    out_unit = units[-1]

    for t in range(T):
        values: dict[str, np.ndarray] = dict(static_values)
        for node in g.nodes:
            if node.id in values:
                continue
            if node.kind == "Input":
                values[node.id] = x
            elif node.kind in ("Conv", "Linear"):
                unit = unit_by_id[node.id]
                if node.id in static_drives:
                    drive = static_drives[node.id]
                elif node.inputs[0] in static:
                    drive = _unit_drive(g, unit, values[node.inputs[0]])
                    static_drives[node.id] = drive
                else:
                    drive = _unit_drive(g, unit, values[node.inputs[0]])
                if unit.is_output:
                    if output_sum is None:
                        output_sum = np.zeros(drive.shape, dtype=np.float64)
                    output_sum += drive.astype(np.float64)
                    values[node.id] = drive
                else:
                    layer = state.layers[node.id]
                    spikes = if_layer_step(layer, drive)
                    if node.id not in counts:
                        counts[node.id] = np.zeros(drive.shape, dtype=np.int32)
                    counts[node.id] += (spikes > 0).astype(np.int32)
                    if record:
                        trains[node.id].append(spikes)
                    values[node.id] = spikes
            elif node.kind == "ReLU":
                values[node.id] = values[node.inputs[0]]
            elif node.kind == "Flatten":
                src = values[node.inputs[0]]
                values[node.id] = src.reshape(src.shape[0], -1)
            elif node.kind == "Add":
                values[node.id] = values[node.inputs[0]] + values[node.inputs[1]]
            elif node.kind == "Output":
                values[node.id] = values[node.inputs[0]]
            else:
                raise ValueError(f"unhandled node kind {node.kind} in simulation")
            if t == 0 and node.id in static and node.kind != "Input":
                static_values[node.id] = values[node.id]

    rates = {}
    thresholds = {}
    terminal_v = {}
    for unit in units:
        if unit.is_output:
            continue
        layer = state.layers[unit.op_id]
        vth_b = _param_view(layer.threshold, counts[unit.op_id].ndim)
        rates[unit.op_id] = ((vth_b / T) * counts[unit.op_id]).astype(DTYPE)
        thresholds[unit.op_id] = layer.threshold
        terminal_v[unit.op_id] = layer.v.astype(DTYPE)
    return SimulationResult(
        T=T,
        counts=counts,
        rates=rates,
        thresholds=thresholds,
        output_sum=output_sum.astype(DTYPE),
        output_rate=(output_sum / T).astype(DTYPE),
        terminal_v=terminal_v,
        trains={k: np.stack(v) for k, v in trains.items()} if record else None,
    )


@dataclass
class RateForward:
    """Closed-form layer-by-layer rate propagation (the calibration-time model)."""

    pre: dict[str, np.ndarray] = field(default_factory=dict)  # W s_bar + b per unit
    rates: dict[str, np.ndarray] = field(default_factory=dict)  # clipfloor outputs
    inputs: dict[str, np.ndarray] = field(default_factory=dict)  # s_bar fed to each unit
    logits: np.ndarray | None = None  # final unit pre-activation (rate scale)


def expected_rate_forward(
    g: NetworkGraph,
    thresholds,
    v0s: dict | None,
    x: np.ndarray,
    T: int,
    stop_after: str | None = None,
    overrides: dict | None = None,
) -> RateForward:
    """Propagate expected rates: s_next = clipfloor(W s + b, T, vth, v0).

    The final unit stays linear (its accumulated output is never spiked).
    stop_after halts propagation after the named unit; overrides maps a unit
    id to (vth, v0) used in place of the table entries.
    """
    check_tensor(x, name="network input")
    T = int(T)
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    units = {u.op_id: u for u in spiking_units(g)}
    result = RateForward()
    values: dict[str, np.ndarray] = {}
    for node in g.nodes:
        if node.kind == "Input":
            values[node.id] = x
        elif node.kind in ("Conv", "Linear"):
            unit = units[node.id]
            result.inputs[node.id] = values[node.inputs[0]]
            pre = _unit_drive(g, unit, values[node.inputs[0]])
            result.pre[node.id] = pre
            if unit.is_output:
                values[node.id] = pre
                result.logits = pre
            else:
                if overrides is not None and node.id in overrides:
                    vth, v0 = overrides[node.id]
                else:
                    vth = thresholds.values_for(node.id)
                    v0 = v0s.get(node.id, 0.0) if v0s is not None else 0.0
                rate = clipfloor(pre, T, vth, v0)
                result.rates[node.id] = rate
                values[node.id] = rate
            if stop_after is not None and node.id == stop_after:
                return result
        elif node.kind == "ReLU":
            values[node.id] = values[node.inputs[0]]
        elif node.kind == "Flatten":
            src = values[node.inputs[0]]
            values[node.id] = src.reshape(src.shape[0], -1)
        elif node.kind == "Add":
            values[node.id] = values[node.inputs[0]] + values[node.inputs[1]]
        elif node.kind == "Output":
            values[node.id] = values[node.inputs[0]]
        else:
            raise ValueError(f"unhandled node kind {node.kind} in rate propagation")
    return result
