"""Per-layer firing-threshold determination: MMSE grid search plus
max-activation and percentile baselines.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .snn import clipfloor
from .tensor import DTYPE, check_tensor

FALLBACK_VTH = 1.0  # used when a layer or channel has no positive activations


@dataclass
class ThresholdTable:
    """Firing thresholds per spiking layer for one simulation length."""

    method: str
    T: int
    N: int = 100
    seed: int | None = None
    values: dict[str, object] = field(default_factory=dict)  # id -> float | [C] array

    def values_for(self, layer_id: str):
        if layer_id not in self.values:
            raise KeyError(f"no threshold recorded for layer {layer_id!r}")
        return self.values[layer_id]

    def set(self, layer_id: str, value) -> None:
        self.values[layer_id] = value


def save_thresholds(table: ThresholdTable, path) -> None:
    doc = {"format": "spikeforge-thresholds", "version": 1, "layers": {}}
    for layer_id, value in sorted(table.values.items()):
        arr = np.asarray(value, dtype=np.float64)
        doc["layers"][layer_id] = {
            "method": table.method,
            "T": table.T,
            "N": table.N,
            "seed": table.seed,
            "values": float(arr) if arr.ndim == 0 else [float(v) for v in arr],
        }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_thresholds(path) -> ThresholdTable:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    layers = doc["layers"]
    method, T, N, seed = "mixed", 0, 0, None
    values: dict[str, object] = {}
    for layer_id, rec in layers.items():
        method, T, N, seed = rec["method"], rec["T"], rec["N"], rec["seed"]
        raw = rec["values"]
        values[layer_id] = (
            float(raw) if np.ndim(raw) == 0 else np.asarray(raw, dtype=DTYPE)
        )
    return ThresholdTable(method=method, T=T, N=N, seed=seed, values=values)


def _mmse_scalar(acts: np.ndarray, T: int, N: int) -> float:
    """Grid point in (0, max positive act] minimizing the clip-floor MSE."""
    positive_max = float(np.max(acts, initial=0.0))
    if positive_max <= 0:
        return FALLBACK_VTH
    # k/N with k=N gives exactly 1.0, so the top grid point equals the max.
    grid = positive_max * (np.arange(1, N + 1, dtype=np.float64) / N)
    target = np.maximum(acts.astype(np.float64), 0.0)
    best_v, best_mse = None, None
    for v in grid:
        approx = clipfloor(acts, T, float(v))
        mse = float(np.mean((approx.astype(np.float64) - target) ** 2))
        if best_mse is None or mse < best_mse:
            best_v, best_mse = float(v), mse
    return best_v


def mmse_threshold(
    acts: np.ndarray, T: int, N: int = 100, per_channel: bool = False
):
    """Threshold(s) minimizing MSE between clipfloor(acts) and ReLU(acts).

    acts are the layer's ANN pre-activations over the calibration batch.
    Ties break toward the smallest grid point. per_channel repeats the search
    independently per output channel (dim 1 of rank-4 acts, features of
    rank-2 acts).
    """
    check_tensor(acts, name="activations")
    T, N = int(T), int(N)
    if N < 2:
        raise ValueError(f"grid size N must be >= 2, got {N}")
    if not per_channel:
        return _mmse_scalar(acts, T, N)
    channels = acts.shape[1]
    out = np.empty(channels, dtype=DTYPE)
    for c in range(channels):
        sl = acts[:, c] if acts.ndim == 2 else acts[:, c, :, :]
        out[c] = _mmse_scalar(np.ascontiguousarray(sl), T, N)
    return out


def baseline_threshold(
    acts: np.ndarray, method: str = "max", p: float = 99.9, per_channel: bool = False
):
    """Max-activation or nearest-rank percentile threshold over positive acts."""
    check_tensor(acts, name="activations")
    if method not in ("max", "percentile"):
        raise ValueError(f"unknown baseline method {method!r}")
    if method == "percentile" and not 0 < p <= 100:
        raise ValueError(f"percentile must be in (0, 100], got {p}")
    if not per_channel:
        return _baseline_scalar(acts, method, p)
    channels = acts.shape[1]
    out = np.empty(channels, dtype=DTYPE)
    for c in range(channels):
        sl = acts[:, c] if acts.ndim == 2 else acts[:, c, :, :]
        out[c] = _baseline_scalar(sl, method, p)
    return out


def _baseline_scalar(acts: np.ndarray, method: str, p: float) -> float:
    positives = acts[acts > 0]
    if positives.size == 0:
        return FALLBACK_VTH
    if method == "max":
        return float(np.max(positives))
    ranked = np.sort(positives.astype(np.float64))
    # Exact decimal rank: float 99.9/100*1000 rounds up past 999 otherwise.
    rank = math.ceil(Fraction(str(float(p))) * ranked.size / 100)
    return float(ranked[max(rank, 1) - 1])
