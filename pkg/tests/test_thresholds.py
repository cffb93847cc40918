"""Threshold search tests: grid oracle, dominance, baselines, serialization."""

import numpy as np
import pytest

from spikeforge import (
    ThresholdTable,
    baseline_threshold,
    clipfloor,
    load_thresholds,
    mmse_threshold,
    relu,
    save_thresholds,
    tensor,
)


def grid_mse(acts, T, v):
    target = np.maximum(acts.astype(np.float64), 0)
    approx = clipfloor(acts, T, float(v)).astype(np.float64)
    return float(np.mean((approx - target) ** 2))


def brute_force_argmin(acts, T, N):
    top = float(np.max(acts, initial=0.0))
    if top <= 0:
        return 1.0
    best_v, best = None, None
    for k in range(1, N + 1):
        v = top * (k / N)
        mse = grid_mse(acts, T, v)
        if best is None or mse < best:
            best_v, best = v, mse
    return best_v


class TestMmse:
    def test_constant_acts_pick_exact_value(self):
        acts = tensor(np.full(64, 1.0))
        assert mmse_threshold(acts, T=4) == pytest.approx(1.0)
        assert grid_mse(acts, 4, 1.0) == 0.0

    def test_outlier_case_from_first_principles(self):
        acts = tensor([1.0, 10.0])
        v = mmse_threshold(acts, T=1, N=100)
        assert v == pytest.approx(10.0)
        assert grid_mse(acts, 1, 10.0) == pytest.approx(0.5)
        assert grid_mse(acts, 1, 1.0) == pytest.approx(40.5)

    def test_dead_layer_fallback(self):
        acts = tensor(np.full(32, -2.0))
        assert mmse_threshold(acts, T=8) == 1.0
        assert grid_mse(acts, 8, 1.0) == 0.0

    @pytest.mark.parametrize("seed", range(6))
    def test_matches_exhaustive_grid_oracle(self, seed):
        rng = np.random.default_rng(seed)
        acts = tensor(rng.normal(1.0, 2.0, size=(64,)))
        T = int(rng.integers(1, 33))
        got = mmse_threshold(acts, T=T, N=50)
        assert got == pytest.approx(brute_force_argmin(acts, T, 50))

    @pytest.mark.parametrize("seed", range(6))
    def test_dominates_max_activation(self, seed):
        rng = np.random.default_rng(100 + seed)
        acts = tensor(rng.lognormal(0.0, 1.0, size=(256,)))
        T = int(rng.integers(1, 64))
        v_mmse = mmse_threshold(acts, T=T, N=100)
        v_max = baseline_threshold(acts, method="max")
        assert grid_mse(acts, T, v_mmse) <= grid_mse(acts, T, v_max)

    def test_per_channel_refines_scalar(self):
        rng = np.random.default_rng(9)
        acts = tensor(rng.lognormal(0.0, 1.0, size=(32, 4, 3, 3)) * np.array([0.2, 1.0, 5.0, 0.7]).reshape(1, 4, 1, 1))
        T = 8
        v_scalar = mmse_threshold(acts, T=T, N=100)
        v_chan = mmse_threshold(acts, T=T, N=100, per_channel=True)
        sse_scalar = 0.0
        sse_chan = 0.0
        for c in range(4):
            sl = acts[:, c]
            target = np.maximum(sl.astype(np.float64), 0)
            sse_scalar += float(np.sum((clipfloor(sl, T, float(v_scalar)).astype(np.float64) - target) ** 2))
            sse_chan += float(np.sum((clipfloor(sl, T, float(v_chan[c])).astype(np.float64) - target) ** 2))
        assert sse_chan <= sse_scalar

    def test_grid_size_validated(self):
        with pytest.raises(ValueError):
            mmse_threshold(tensor([1.0]), T=4, N=1)


class TestBaselines:
    def test_max(self):
        assert baseline_threshold(tensor([1.0, 10.0]), method="max") == 10.0

    def test_percentile_nearest_rank(self):
        acts = tensor(np.arange(1.0, 1001.0))
        assert baseline_threshold(acts, method="percentile", p=99.9) == 999.0

    def test_percentile_small_sets(self):
        acts = tensor([5.0, 1.0, 3.0])
        assert baseline_threshold(acts, method="percentile", p=50.0) == 3.0
        assert baseline_threshold(acts, method="percentile", p=100.0) == 5.0

    def test_all_zero_fallback(self):
        assert baseline_threshold(tensor(np.zeros(16)), method="max") == 1.0
        assert baseline_threshold(tensor(np.zeros(16)), method="percentile", p=99.9) == 1.0

    def test_per_channel(self):
        acts = tensor(np.stack([np.full((4, 4), 2.0), np.full((4, 4), 7.0)])[None])
        v = baseline_threshold(acts, method="max", per_channel=True)
        np.testing.assert_allclose(v, [2.0, 7.0])

    def test_bad_args(self):
        with pytest.raises(ValueError):
            baseline_threshold(tensor([1.0]), method="median")
        with pytest.raises(ValueError):
            baseline_threshold(tensor([1.0]), method="percentile", p=0.0)


class TestSerialization:
    def test_round_trip(self, tmp_path):
        table = ThresholdTable(
            method="mmse_channel",
            T=32,
            N=100,
            seed=7,
            values={"conv1": np.array([0.5, 1.25], np.float32), "fc": 2.5},
        )
        path = tmp_path / "thresholds.json"
        save_thresholds(table, path)
        back = load_thresholds(path)
        assert back.method == "mmse_channel"
        assert back.T == 32 and back.N == 100 and back.seed == 7
        np.testing.assert_allclose(back.values_for("conv1"), [0.5, 1.25])
        assert back.values_for("fc") == 2.5

    def test_missing_layer_raises(self):
        table = ThresholdTable(method="max", T=8)
        with pytest.raises(KeyError):
            table.values_for("nope")
