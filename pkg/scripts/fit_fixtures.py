#!/usr/bin/env python3
"""Fit the committed toy fixtures and write them under src/spikeforge/fixtures/.

Run once during development; the resulting .sfm/.json artifacts are committed
so CI never trains anything. Front-end filters are seeded random, BatchNorm
statistics are measured on a fitting batch, and only the readout layer is
solved by ridge-regularized least squares.
"""

import json
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from spikeforge import (  # noqa: E402
    AvgPoolParams,
    BatchNormParams,
    ConvParams,
    LayerNode,
    LinearParams,
    NetworkGraph,
    accuracy,
    ann_forward,
    avg_pool2d,
    conv2d_forward,
    fold_batchnorm,
    generate_samples,
    save_model,
)
from spikeforge.tensor import DTYPE  # noqa: E402

FIXDIR = os.path.join(os.path.dirname(__file__), "..", "src", "spikeforge", "fixtures")

CANONICAL_SEED = 11
N_TRAIN = 1536
N_TEST = 400


def bn_apply(z, bn: BatchNormParams):
    inv = bn.gamma / np.sqrt(bn.running_var + bn.epsilon)
    if z.ndim == 4:
        return ((z - bn.running_mean[None, :, None, None]) * inv[None, :, None, None]
                + bn.beta[None, :, None, None]).astype(DTYPE)
    return ((z - bn.running_mean[None, :]) * inv[None, :] + bn.beta[None, :]).astype(DTYPE)


def measured_bn(z, gamma, beta, epsilon=1e-5):
    axes = (0, 2, 3) if z.ndim == 4 else (0,)
    mean = np.mean(z.astype(np.float64), axis=axes).astype(DTYPE)
    var = np.var(z.astype(np.float64), axis=axes).astype(DTYPE)
    return BatchNormParams(
        gamma=np.asarray(gamma, dtype=DTYPE),
        beta=np.asarray(beta, dtype=DTYPE),
        running_mean=mean,
        running_var=var,
        epsilon=epsilon,
    )


def ridge_readout(features, labels, classes, lam=1e-1):
    n, f = features.shape
    targets = -np.ones((n, classes))
    targets[np.arange(n), labels] = 1.0
    fa = np.concatenate([features.astype(np.float64), np.ones((n, 1))], axis=1)
    gram = fa.T @ fa + lam * np.eye(f + 1)
    sol = np.linalg.solve(gram, fa.T @ targets)
    weight = sol[:f].T.astype(DTYPE)
    bias = sol[f].astype(DTYPE)
    return weight, bias


def fit_two_moons():
    rng = np.random.default_rng(2024)
    train = generate_samples("two-moons-conv", CANONICAL_SEED, N_TRAIN)
    x = train.images

    w1 = rng.normal(0.0, 0.5, (8, 1, 3, 3)).astype(DTYPE)
    b1 = np.zeros(8, dtype=DTYPE)
    conv1 = ConvParams(w1, b1, stride=(1, 1), padding=(1, 1))
    z1 = conv2d_forward(x, conv1)
    gamma1 = np.array([1.0, 1.2, 0.8, 1.1, 0.9, 1.3, 0.7, 1.0], dtype=DTYPE)
    beta1 = np.full(8, 0.25, dtype=DTYPE)
    bn1 = measured_bn(z1, gamma1, beta1)
    a1 = np.maximum(bn_apply(z1, bn1), 0)

    pooled = avg_pool2d(a1, (2, 2), (2, 2))

    w2 = rng.normal(0.0, 0.20, (8, 8, 3, 3)).astype(DTYPE)
    b2 = np.zeros(8, dtype=DTYPE)
    conv2 = ConvParams(w2, b2, stride=(1, 1), padding=(1, 1))
    z2 = conv2d_forward(pooled, conv2)
    gamma2 = np.array([1.1, 0.9, 1.0, 1.2, 0.8, 1.0, 1.1, 0.9], dtype=DTYPE)
    beta2 = np.full(8, 0.2, dtype=DTYPE)
    bn2 = measured_bn(z2, gamma2, beta2)
    a2 = np.maximum(bn_apply(z2, bn2), 0)

    feats = a2.reshape(a2.shape[0], -1)
    weight, bias = ridge_readout(feats, train.labels, classes=2)

    nodes = [
        LayerNode("input", "Input"),
        LayerNode("conv1", "Conv", ["input"], conv1),
        LayerNode("bn1", "BatchNorm", ["conv1"], bn1),
        LayerNode("relu1", "ReLU", ["bn1"]),
        LayerNode("pool1", "AvgPool", ["relu1"], AvgPoolParams((2, 2), (2, 2))),
        LayerNode("conv2", "Conv", ["pool1"], conv2),
        LayerNode("bn2", "BatchNorm", ["conv2"], bn2),
        LayerNode("relu2", "ReLU", ["bn2"]),
        LayerNode("flatten", "Flatten", ["relu2"]),
        LayerNode("fc", "Linear", ["flatten"], LinearParams(weight, bias)),
        LayerNode("output", "Output", ["fc"]),
    ]
    g = NetworkGraph(nodes, {"input_shape": [1, 8, 8], "class_count": 2, "version": 1})
    return g


def fit_blob_mlp():
    rng = np.random.default_rng(4096)
    train = generate_samples("blob-mlp", CANONICAL_SEED, N_TRAIN)
    pooled = avg_pool2d(train.images, (1, 2), (1, 2))
    flat = pooled.reshape(pooled.shape[0], -1)

    w1 = rng.normal(0.0, 0.6, (16, 8)).astype(DTYPE)
    b1 = np.zeros(16, dtype=DTYPE)
    z1 = (flat.astype(np.float64) @ w1.astype(np.float64).T + b1).astype(DTYPE)
    gamma = np.array(
        [1.0, 1.1, 0.9, 1.2, 0.8, 1.0, 1.1, 0.9, 1.0, 1.2, 0.8, 1.1, 0.9, 1.0, 1.1, 0.9],
        dtype=DTYPE,
    )
    beta = np.full(16, 0.3, dtype=DTYPE)
    bn = measured_bn(z1, gamma, beta)
    a1 = np.maximum(bn_apply(z1, bn), 0)
    weight, bias = ridge_readout(a1, train.labels, classes=4)

    nodes = [
        LayerNode("input", "Input"),
        LayerNode("pool1", "AvgPool", ["input"], AvgPoolParams((1, 2), (1, 2))),
        LayerNode("flatten", "Flatten", ["pool1"]),
        LayerNode("fc1", "Linear", ["flatten"], LinearParams(w1, b1)),
        LayerNode("bn1", "BatchNorm", ["fc1"], bn),
        LayerNode("relu1", "ReLU", ["bn1"]),
        LayerNode("fc2", "Linear", ["relu1"], LinearParams(weight, bias)),
        LayerNode("output", "Output", ["fc2"]),
    ]
    g = NetworkGraph(nodes, {"input_shape": [1, 2, 8], "class_count": 4, "version": 1})
    return g


def finalize(kind: str, stem: str, g: NetworkGraph):
    test = generate_samples(kind, CANONICAL_SEED + 1, N_TEST)
    logits, _ = ann_forward(fold_batchnorm(g), test.images)
    acc = accuracy(logits, test.labels)
    os.makedirs(FIXDIR, exist_ok=True)
    save_model(g, os.path.join(FIXDIR, f"{stem}.sfm"))
    manifest = {
        "kind": kind,
        "canonical_seed": CANONICAL_SEED,
        "n_train": N_TRAIN,
        "n_test": N_TEST,
        "class_count": g.metadata["class_count"],
        "ann_accuracy": acc,
    }
    with open(os.path.join(FIXDIR, f"{stem}.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"{kind}: ANN test accuracy {acc:.2f}%")


def main():
    finalize("two-moons-conv", "two_moons_conv", fit_two_moons())
    finalize("blob-mlp", "blob_mlp", fit_blob_mlp())


if __name__ == "__main__":
    main()
