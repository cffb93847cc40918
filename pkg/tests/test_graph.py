"""Graph rewrite tests: BN folding, pool conversion, threshold normalization."""

import numpy as np
import pytest

from spikeforge import (
    AvgPoolParams,
    BatchNormParams,
    ConvParams,
    LayerNode,
    LinearParams,
    NetworkGraph,
    ThresholdTable,
    UnsupportedTopologyError,
    ann_forward,
    avgpool_to_depthwise,
    fold_batchnorm,
    init_state,
    normalize_thresholds,
    simulate_snn,
    tensor,
    validate_graph,
)


def conv_bn_net(rng, gamma=None, beta=None, mean=None, var=None, eps=1e-5):
    w = tensor(rng.normal(size=(4, 2, 3, 3)))
    b = tensor(rng.normal(size=4))
    gamma = tensor(np.ones(4) if gamma is None else gamma)
    beta = tensor(np.zeros(4) if beta is None else beta)
    mean = tensor(np.zeros(4) if mean is None else mean)
    var = tensor(np.ones(4) if var is None else var)
    nodes = [
        LayerNode("in", "Input"),
        LayerNode("conv", "Conv", ["in"], ConvParams(w, b, padding=(1, 1))),
        LayerNode("bn", "BatchNorm", ["conv"], BatchNormParams(gamma, beta, mean, var, eps)),
        LayerNode("relu", "ReLU", ["bn"]),
        LayerNode("flat", "Flatten", ["relu"]),
        LayerNode("fc", "Linear", ["flat"], LinearParams(tensor(rng.normal(size=(3, 64))), tensor(np.zeros(3)))),
        LayerNode("out", "Output", ["fc"]),
    ]
    return NetworkGraph(nodes, {"input_shape": [2, 4, 4], "class_count": 3})


def bn_manual(z, bn: BatchNormParams):
    inv = bn.gamma.astype(np.float64) / np.sqrt(bn.running_var.astype(np.float64) + bn.epsilon)
    shaped = (1, -1) + (1,) * (z.ndim - 2)
    out = (z.astype(np.float64) - bn.running_mean.astype(np.float64).reshape(shaped)) * inv.reshape(
        shaped
    ) + bn.beta.astype(np.float64).reshape(shaped)
    return out.astype(np.float32)


class TestFoldBatchnorm:
    def test_identity_bn_unchanged(self):
        g = conv_bn_net(np.random.default_rng(0), eps=0.0)
        folded = fold_batchnorm(g)
        orig = g.node("conv").params
        new = folded.node("conv").params
        np.testing.assert_array_equal(orig.weight, new.weight)
        np.testing.assert_array_equal(orig.bias, new.bias)
        assert all(n.kind != "BatchNorm" for n in folded.nodes)

    def test_gamma_two_doubles(self):
        g = conv_bn_net(np.random.default_rng(1), gamma=np.full(4, 2.0), eps=0.0)
        folded = fold_batchnorm(g)
        np.testing.assert_allclose(
            folded.node("conv").params.weight, 2.0 * g.node("conv").params.weight, rtol=1e-6
        )
        np.testing.assert_allclose(
            folded.node("conv").params.bias, 2.0 * g.node("conv").params.bias, rtol=1e-6
        )

    @pytest.mark.parametrize("seed", range(5))
    def test_forward_equivalence(self, seed):
        rng = np.random.default_rng(seed)
        g = conv_bn_net(
            rng,
            gamma=rng.uniform(0.5, 2.0, 4),
            beta=rng.normal(size=4),
            mean=rng.normal(size=4),
            var=rng.uniform(0.2, 3.0, 4),
        )
        x = tensor(rng.normal(size=(3, 2, 4, 4)))
        bn = g.node("bn").params
        conv = g.node("conv").params
        from spikeforge import conv2d_forward

        manual = bn_manual(conv2d_forward(x, conv), bn)
        folded = fold_batchnorm(g)
        via_fold = conv2d_forward(x, folded.node("conv").params)
        assert np.abs(manual - via_fold).max() <= 1e-5

    def test_linear_bn_fold(self):
        rng = np.random.default_rng(3)
        w = tensor(rng.normal(size=(4, 6)))
        b = tensor(rng.normal(size=4))
        bn = BatchNormParams(
            tensor(rng.uniform(0.5, 2, 4)),
            tensor(rng.normal(size=4)),
            tensor(rng.normal(size=4)),
            tensor(rng.uniform(0.5, 2, 4)),
        )
        nodes = [
            LayerNode("in", "Input"),
            LayerNode("fc", "Linear", ["in"], LinearParams(w, b)),
            LayerNode("bn", "BatchNorm", ["fc"], bn),
            LayerNode("fc2", "Linear", ["bn"], LinearParams(tensor(np.eye(4)), tensor(np.zeros(4)))),
            LayerNode("out", "Output", ["fc2"]),
        ]
        g = NetworkGraph(nodes, {"input_shape": [6], "class_count": 4})
        x = tensor(rng.normal(size=(5, 6)))
        from spikeforge import linear_forward

        manual = bn_manual(linear_forward(x, w, b), bn)
        folded = fold_batchnorm(g)
        fp = folded.node("fc").params
        assert np.abs(manual - linear_forward(x, fp.weight, fp.bias)).max() <= 1e-5

    def test_bad_predecessor_rejected(self):
        nodes = [
            LayerNode("in", "Input"),
            LayerNode("relu", "ReLU", ["in"]),
            LayerNode(
                "bn",
                "BatchNorm",
                ["relu"],
                BatchNormParams(tensor([1.0]), tensor([0.0]), tensor([0.0]), tensor([1.0])),
            ),
            LayerNode("out", "Output", ["bn"]),
        ]
        g = NetworkGraph(nodes, {"input_shape": [1, 2, 2]})
        with pytest.raises(UnsupportedTopologyError):
            fold_batchnorm(g)

    def test_idempotent_on_folded(self):
        g = conv_bn_net(np.random.default_rng(4))
        folded = fold_batchnorm(g)
        assert fold_batchnorm(folded) == folded


def pool_net(rng, kernel, stride, channels=3, hw=8):
    nodes = [
        LayerNode("in", "Input"),
        LayerNode("pool", "AvgPool", ["in"], AvgPoolParams(kernel, stride)),
        LayerNode("flat", "Flatten", ["pool"]),
        LayerNode(
            "fc",
            "Linear",
            ["flat"],
            LinearParams(
                tensor(
                    rng.normal(
                        size=(2, channels * ((hw - kernel[0]) // stride[0] + 1) * ((hw - kernel[1]) // stride[1] + 1))
                    )
                ),
                tensor(np.zeros(2)),
            ),
        ),
        LayerNode("out", "Output", ["fc"]),
    ]
    return NetworkGraph(nodes, {"input_shape": [channels, hw, hw], "class_count": 2})


class TestAvgpoolToDepthwise:
    def test_2x2_weights(self):
        g = pool_net(np.random.default_rng(0), (2, 2), (2, 2))
        rewritten = avgpool_to_depthwise(g)
        node = rewritten.node("pool")
        assert node.kind == "Conv"
        assert node.params.groups == 3
        np.testing.assert_array_equal(node.params.weight, np.full((3, 1, 2, 2), 0.25, np.float32))
        assert not node.params.bias.any()

    def test_7x7_weights(self):
        g = pool_net(np.random.default_rng(1), (7, 7), (1, 1))
        rewritten = avgpool_to_depthwise(g)
        np.testing.assert_array_equal(
            rewritten.node("pool").params.weight,
            np.full((3, 1, 7, 7), np.float32(1.0) / np.float32(49.0), np.float32),
        )

    @pytest.mark.parametrize("seed", range(5))
    def test_forward_equivalence(self, seed):
        rng = np.random.default_rng(seed)
        g = pool_net(rng, (2, 2), (2, 2))
        x = tensor(rng.normal(size=(4, 3, 8, 8)))
        before, _ = ann_forward(g, x)
        after, _ = ann_forward(avgpool_to_depthwise(g), x)
        assert np.abs(before - after).max() <= 1e-6

    def test_idempotent(self):
        g = pool_net(np.random.default_rng(2), (2, 2), (2, 2))
        once = avgpool_to_depthwise(g)
        assert avgpool_to_depthwise(once) == once


def two_layer_mlp(rng):
    nodes = [
        LayerNode("in", "Input"),
        LayerNode(
            "fc1", "Linear", ["in"], LinearParams(tensor(rng.normal(size=(6, 4))), tensor(rng.normal(size=6) * 0.2))
        ),
        LayerNode("r1", "ReLU", ["fc1"]),
        LayerNode(
            "fc2", "Linear", ["r1"], LinearParams(tensor(rng.normal(size=(3, 6))), tensor(rng.normal(size=3) * 0.2))
        ),
        LayerNode("out", "Output", ["fc2"]),
    ]
    return NetworkGraph(nodes, {"input_shape": [4], "class_count": 3})


class TestNormalizeThresholds:
    def test_all_ones_unchanged(self):
        g = two_layer_mlp(np.random.default_rng(0))
        table = ThresholdTable(method="max", T=8, values={"fc1": 1.0})
        g2, t2 = normalize_thresholds(g, table)
        assert g2 == g
        assert t2.values_for("fc1") == 1.0

    def test_half_scale_hand_case(self):
        g = two_layer_mlp(np.random.default_rng(1))
        table = ThresholdTable(method="max", T=8, values={"fc1": 4.0})
        g2, _ = normalize_thresholds(g, table)
        # layer fc1: prev threshold 1 (analog input), own threshold 4 -> x0.25
        np.testing.assert_allclose(
            g2.node("fc1").params.weight, g.node("fc1").params.weight / 4.0, rtol=1e-6
        )
        # logits layer: incoming amplitude 4, no own threshold -> x4
        np.testing.assert_allclose(
            g2.node("fc2").params.weight, g.node("fc2").params.weight * 4.0, rtol=1e-6
        )

    @pytest.mark.parametrize("seed", range(10))
    def test_spike_trains_preserved(self, seed):
        rng = np.random.default_rng(100 + seed)
        g = two_layer_mlp(rng)
        x = tensor(rng.normal(0.4, 0.6, size=(5, 4)))
        table = ThresholdTable(method="max", T=16, values={"fc1": float(rng.uniform(0.5, 4.0))})
        st = init_state(g, table)
        before = simulate_snn(g, st, x, 16, record=True)
        g2, t2 = normalize_thresholds(g, table)
        st2 = init_state(g2, t2)
        after = simulate_snn(g2, st2, x, 16, record=True)
        np.testing.assert_array_equal(before.trains["fc1"] > 0, after.trains["fc1"] > 0)
        np.testing.assert_allclose(before.output_sum, after.output_sum, atol=1e-4)

    def test_nonpositive_threshold_rejected(self):
        g = two_layer_mlp(np.random.default_rng(2))
        with pytest.raises(ValueError):
            normalize_thresholds(g, ThresholdTable(method="max", T=8, values={"fc1": 0.0}))

    def test_per_channel_rejected(self):
        g = two_layer_mlp(np.random.default_rng(3))
        table = ThresholdTable(method="max", T=8, values={"fc1": np.ones(6, np.float32)})
        with pytest.raises(ValueError):
            normalize_thresholds(g, table)


class TestValidateGraph:
    def test_valid_net(self):
        assert validate_graph(two_layer_mlp(np.random.default_rng(0))) == []

    def test_add_arity_violation(self):
        nodes = [
            LayerNode("in", "Input"),
            LayerNode("add", "Add", ["in"]),
            LayerNode("out", "Output", ["add"]),
        ]
        g = NetworkGraph(nodes, {"input_shape": [1, 2, 2]})
        assert any("Add takes 2" in v for v in validate_graph(g))

    def test_bad_conv_geometry_reported(self):
        nodes = [
            LayerNode("in", "Input"),
            LayerNode(
                "conv",
                "Conv",
                ["in"],
                ConvParams(tensor(np.zeros((1, 1, 2, 2))), tensor(np.zeros(1)), stride=(2, 2)),
            ),
            LayerNode("out", "Output", ["conv"]),
        ]
        g = NetworkGraph(nodes, {"input_shape": [1, 5, 5]})
        assert any("shape propagation failed" in v for v in validate_graph(g))

    def test_two_inputs_reported(self):
        nodes = [
            LayerNode("in", "Input"),
            LayerNode("in2", "Input"),
            LayerNode("out", "Output", ["in"]),
        ]
        g = NetworkGraph(nodes, {"input_shape": [1]})
        assert any("exactly one Input" in v for v in validate_graph(g))

    def test_forward_reference_reported(self):
        nodes = [
            LayerNode("in", "Input"),
            LayerNode("relu", "ReLU", ["later"]),
            LayerNode("later", "ReLU", ["in"]),
            LayerNode("out", "Output", ["later"]),
        ]
        g = NetworkGraph(nodes, {"input_shape": [1]})
        assert any("does not precede" in v for v in validate_graph(g))
