"""Diagnostics tests: error split, propagation bound, sparsity, energy."""

import numpy as np
import pytest

from spikeforge import (
    ConvParams,
    LayerNode,
    LinearParams,
    NetworkGraph,
    ThresholdTable,
    ann_forward,
    clipfloor,
    energy_estimate,
    expected_rate_forward,
    firing_rate_stats,
    init_state,
    layer_error,
    error_propagation_bound,
    make_fixture,
    relu,
    rewrite_for_snn,
    simulate_snn,
    spiking_units,
    tensor,
)


def mlp(rng, inp=4, hidden=5, classes=3, bias_scale=0.2):
    nodes = [
        LayerNode("in", "Input"),
        LayerNode(
            "fc1",
            "Linear",
            ["in"],
            LinearParams(tensor(rng.normal(size=(hidden, inp))), tensor(rng.normal(size=hidden) * bias_scale)),
        ),
        LayerNode("r1", "ReLU", ["fc1"]),
        LayerNode(
            "fc2",
            "Linear",
            ["r1"],
            LinearParams(tensor(rng.normal(size=(classes, hidden))), tensor(np.zeros(classes))),
        ),
        LayerNode("out", "Output", ["fc2"]),
    ]
    return NetworkGraph(nodes, {"input_shape": [inp], "class_count": classes})


class TestLayerError:
    def test_identical_tensors_zero_report(self):
        rng = np.random.default_rng(0)
        g = mlp(rng)
        x = tensor(np.abs(rng.normal(0.5, 0.3, size=(8, 4))))
        _, trace = ann_forward(g, x, capture=True)
        vth = float(trace.pre["fc1"].max())
        table = ThresholdTable(method="max", T=1000000, values={"fc1": vth})
        # enormous T: clipfloor error vanishes except float quantization
        rf = expected_rate_forward(g, table, None, x, 1000000)
        reports = layer_error(trace, rf, table, 1000000)
        assert reports[0].e_norm <= 1e-3

    def test_floor_branch_classification(self):
        # x = 2.4 with vth 10, T 5 sits inside the staircase: floor branch
        g = mlp(np.random.default_rng(1), inp=1, hidden=1, classes=1)
        g.node("fc1").params = LinearParams(tensor([[1.0]]), tensor([0.0]))
        x = tensor([[2.4]])
        _, trace = ann_forward(g, x, capture=True)
        table = ThresholdTable(method="max", T=5, values={"fc1": 10.0})
        rf = expected_rate_forward(g, table, None, x, 5)
        rep = layer_error(trace, rf, table, 5)[0]
        assert rep.floor_count == 1 and rep.clip_count == 0
        assert rep.e_norm == pytest.approx(0.4, abs=1e-6)

    def test_clip_branch_classification(self):
        g = mlp(np.random.default_rng(2), inp=1, hidden=1, classes=1)
        g.node("fc1").params = LinearParams(tensor([[1.0]]), tensor([0.0]))
        x = tensor([[25.0]])
        _, trace = ann_forward(g, x, capture=True)
        table = ThresholdTable(method="max", T=5, values={"fc1": 10.0})
        rf = expected_rate_forward(g, table, None, x, 5)
        rep = layer_error(trace, rf, table, 5)[0]
        assert rep.clip_count == 1 and rep.floor_count == 0
        assert rep.e_norm == pytest.approx(15.0, abs=1e-5)

    def test_terminal_violation_fraction_reported(self):
        rng = np.random.default_rng(3)
        g = mlp(rng)
        x = tensor(np.abs(rng.normal(0.5, 0.5, size=(6, 4))))
        table = ThresholdTable(method="max", T=8, values={"fc1": 1.0})
        state = init_state(g, table)
        sim = simulate_snn(g, state, x, 8)
        _, trace = ann_forward(g, x, capture=True)
        rf = expected_rate_forward(g, table, None, x, 8)
        rep = layer_error(trace, rf, table, 8, sim=sim)[0]
        assert rep.terminal_violation_fraction is not None
        assert 0.0 <= rep.terminal_violation_fraction <= 1.0


class TestPropagationBound:
    def test_exact_conversion_limit(self):
        rng = np.random.default_rng(4)
        g = mlp(rng)
        x = tensor(np.abs(rng.normal(0.5, 0.4, size=(16, 4))))
        _, trace = ann_forward(g, x, capture=True)
        acts = trace.pre["fc1"]
        T = 1 << 22
        table = ThresholdTable(method="max", T=T, values={"fc1": float(acts.max())})
        rf = expected_rate_forward(g, table, None, x, T)
        diag = error_propagation_bound(g, trace, rf, table, T)
        assert diag["lhs"] <= 1e-4 and diag["rhs"] <= 1e-4

    def test_single_layer_identity(self):
        rng = np.random.default_rng(5)
        g = mlp(rng)
        x = tensor(np.abs(rng.normal(0.5, 0.7, size=(12, 4))))
        _, trace = ann_forward(g, x, capture=True)
        T = 8
        table = ThresholdTable(method="max", T=T, values={"fc1": 1.1})
        rf = expected_rate_forward(g, table, None, x, T)
        diag = error_propagation_bound(g, trace, rf, table, T)
        # one hidden layer: both sides equal ||ReLU(z1) - clipfloor(z1)||
        err = relu(trace.pre["fc1"]) - clipfloor(rf.pre["fc1"], T, 1.1)
        expect = float(np.linalg.norm(err.astype(np.float64)))
        assert diag["lhs"] == pytest.approx(expect, rel=1e-6)
        assert diag["rhs"] == pytest.approx(expect, rel=1e-6)

    def test_two_layer_reports_both_sides(self):
        rng = np.random.default_rng(6)
        nodes = [
            LayerNode("in", "Input"),
            LayerNode("fc1", "Linear", ["in"], LinearParams(tensor(rng.normal(size=(5, 4))), tensor(np.zeros(5)))),
            LayerNode("r1", "ReLU", ["fc1"]),
            LayerNode("fc2", "Linear", ["r1"], LinearParams(tensor(rng.normal(size=(5, 5))), tensor(np.zeros(5)))),
            LayerNode("r2", "ReLU", ["fc2"]),
            LayerNode("fc3", "Linear", ["r2"], LinearParams(tensor(rng.normal(size=(2, 5))), tensor(np.zeros(2)))),
            LayerNode("out", "Output", ["fc3"]),
        ]
        g = NetworkGraph(nodes, {"input_shape": [4], "class_count": 2})
        x = tensor(np.abs(rng.normal(0.5, 0.5, size=(10, 4))))
        _, trace = ann_forward(g, x, capture=True)
        table = ThresholdTable(method="max", T=8, values={"fc1": 1.0, "fc2": 1.5})
        rf = expected_rate_forward(g, table, None, x, 8)
        diag = error_propagation_bound(g, trace, rf, table, 8)
        assert diag["lhs"] > 0 and diag["rhs"] > 0
        assert set(diag["err_norms"]) == {"fc1", "fc2"}

    def test_add_topology_skipped(self):
        rng = np.random.default_rng(7)
        nodes = [
            LayerNode("in", "Input"),
            LayerNode("fc1", "Linear", ["in"], LinearParams(tensor(rng.normal(size=(4, 4))), tensor(np.zeros(4)))),
            LayerNode("r1", "ReLU", ["fc1"]),
            LayerNode("add", "Add", ["r1", "in"]),
            LayerNode("fc2", "Linear", ["add"], LinearParams(tensor(np.eye(4)), tensor(np.zeros(4)))),
            LayerNode("out", "Output", ["fc2"]),
        ]
        g = NetworkGraph(nodes, {"input_shape": [4], "class_count": 4})
        x = tensor(np.abs(rng.normal(size=(3, 4))))
        _, trace = ann_forward(g, x, capture=True)
        table = ThresholdTable(method="max", T=8, values={"fc1": 1.0})
        rf = expected_rate_forward(g, table, None, x, 8)
        assert "skipped" in error_propagation_bound(g, trace, rf, table, 8)

    def test_relu_contraction_exact(self):
        rng = np.random.default_rng(8)
        for _ in range(100):
            a = tensor(rng.normal(scale=2.0, size=(6, 7)))
            b = tensor(rng.normal(scale=2.0, size=(6, 7)))
            assert np.linalg.norm(relu(a) - relu(b)) <= np.linalg.norm(a - b)


class TestFiringStats:
    def test_always_firing(self):
        rng = np.random.default_rng(9)
        g = mlp(rng)
        g.node("fc1").params = LinearParams(
            tensor(np.zeros((5, 4))), tensor(np.full(5, 2.0))
        )
        table = ThresholdTable(method="max", T=8, values={"fc1": 2.0})
        state = init_state(g, table)
        res = simulate_snn(g, state, tensor(rng.normal(size=(3, 4))), 8)
        stats = firing_rate_stats(res)
        assert stats["fc1"]["mean"] == 1.0 and stats["fc1"]["min"] == 1.0

    def test_no_spikes(self):
        rng = np.random.default_rng(10)
        g = mlp(rng)
        g.node("fc1").params = LinearParams(tensor(np.zeros((5, 4))), tensor(np.zeros(5)))
        table = ThresholdTable(method="max", T=8, values={"fc1": 1.0})
        state = init_state(g, table)
        res = simulate_snn(g, state, tensor(rng.normal(size=(3, 4))), 8)
        assert firing_rate_stats(res)["fc1"]["max"] == 0.0

    def test_matches_recount_from_recorded_trains(self):
        g, _, test = make_fixture("two-moons-conv")
        work = rewrite_for_snn(g)
        units = spiking_units(work)
        table = ThresholdTable(method="max", T=12)
        _, trace = ann_forward(work, test.images[:16], capture=True)
        from spikeforge import baseline_threshold

        for u in units:
            if not u.is_output:
                table.set(u.op_id, baseline_threshold(trace.pre[u.op_id], method="max"))
        state = init_state(work, table)
        res = simulate_snn(work, state, test.images[:16], 12, record=True)
        stats = firing_rate_stats(res)
        for layer_id, train in res.trains.items():
            fired = (train > 0).astype(np.float64)
            assert stats[layer_id]["mean"] == pytest.approx(float(fired.mean()))
            per_neuron = fired.sum(axis=0) / res.T
            assert stats[layer_id]["max"] == pytest.approx(float(per_neuron.max()))
            assert stats[layer_id]["min"] == pytest.approx(float(per_neuron.min()))


class TestEnergy:
    def test_zero_spikes_zero_snn_energy(self):
        rng = np.random.default_rng(11)
        g = mlp(rng)
        g.node("fc1").params = LinearParams(tensor(np.zeros((5, 4))), tensor(np.zeros(5)))
        table = ThresholdTable(method="max", T=8, values={"fc1": 1.0})
        state = init_state(g, table)
        res = simulate_snn(g, state, tensor(rng.normal(size=(2, 4))), 8)
        report = energy_estimate(res, g)
        assert report["snn_energy"] == 0.0
        assert report["ann_energy"] > 0

    def test_single_spike_fanout_hand_count(self):
        # one interior spike feeding a 3x3-kernel conv with 4 output channels
        nodes = [
            LayerNode("in", "Input"),
            LayerNode(
                "c1",
                "Conv",
                ["in"],
                ConvParams(tensor(np.full((1, 1, 1, 1), 2.0)), tensor(np.zeros(1))),
            ),
            LayerNode("r1", "ReLU", ["c1"]),
            LayerNode(
                "c2",
                "Conv",
                ["r1"],
                ConvParams(tensor(np.zeros((4, 1, 3, 3))), tensor(np.zeros(4)), padding=(1, 1)),
            ),
            LayerNode("flat", "Flatten", ["c2"]),
            LayerNode("fc", "Linear", ["flat"], LinearParams(tensor(np.zeros((2, 100))), tensor(np.zeros(2)))),
            LayerNode("out", "Output", ["fc"]),
        ]
        g = NetworkGraph(nodes, {"input_shape": [1, 5, 5], "class_count": 2})
        x = np.zeros((1, 1, 5, 5), np.float32)
        x[0, 0, 2, 2] = 1.0  # center pixel: full 3x3 receptive coverage
        table = ThresholdTable(method="max", T=1, values={"c1": 2.0, "c2": 1.0})
        state = init_state(g, table)
        res = simulate_snn(g, state, tensor(x), 1)
        assert res.counts["c1"].sum() == 1
        report = energy_estimate(res, g)
        assert report["per_layer_synaptic_ops"]["c1"] == pytest.approx(36.0)
        assert report["snn_energy"] == pytest.approx(0.9 * 36.0)

    def test_energy_strictly_increases_with_added_spikes(self):
        rng = np.random.default_rng(12)
        g = mlp(rng)
        table = ThresholdTable(method="max", T=8, values={"fc1": 0.8})
        state = init_state(g, table)
        res = simulate_snn(g, state, tensor(np.abs(rng.normal(0.5, 0.5, (3, 4)))), 8)
        base = energy_estimate(res, g)["snn_energy"]
        bumped = res.counts["fc1"].copy()
        bumped[0, 0] += 1
        res.counts["fc1"] = bumped
        assert energy_estimate(res, g)["snn_energy"] > base

    def test_fixture_matches_counting_oracle(self):
        g, _, test = make_fixture("two-moons-conv")
        work = rewrite_for_snn(g)
        units = spiking_units(work)
        table = ThresholdTable(method="max", T=6)
        _, trace = ann_forward(work, test.images[:8], capture=True)
        from spikeforge import baseline_threshold, infer_shapes

        for u in units:
            if not u.is_output:
                table.set(u.op_id, baseline_threshold(trace.pre[u.op_id], method="max"))
        state = init_state(work, table)
        res = simulate_snn(work, state, test.images[:8], 6)
        report = energy_estimate(res, work)

        shapes = infer_shapes(work)
        consumer = {"conv1": "pool1", "pool1": "conv2", "conv2": "fc"}
        total = 0.0
        for layer_id, counts in res.counts.items():
            node = work.node(consumer[layer_id])
            for n in range(counts.shape[0]):
                it = np.nditer(counts[n], flags=["multi_index"])
                while not it.finished:
                    m = int(it[0])
                    if m:
                        if node.kind == "Linear":
                            total += m * node.params.weight.shape[0]
                        else:
                            c, h, w = it.multi_index
                            p = node.params
                            hh, ww = shapes[layer_id][1:]
                            oh, ow = p.out_hw(hh, ww)
                            taps_h = sum(
                                1
                                for o in range(oh)
                                if 0 <= h - (o * p.stride[0] - p.padding[0]) < p.weight.shape[2]
                            )
                            taps_w = sum(
                                1
                                for o in range(ow)
                                if 0 <= w - (o * p.stride[1] - p.padding[1]) < p.weight.shape[3]
                            )
                            total += m * taps_h * taps_w * (p.out_channels // p.groups)
                    it.iternext()
        assert report["snn_energy"] * counts.shape[0] == pytest.approx(0.9 * total)
