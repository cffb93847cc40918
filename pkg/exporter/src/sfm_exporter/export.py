"""PyTorch checkpoint and dataset export.

Walks a traced module graph and emits the equivalent SFM node list with raw
(unfused) BatchNorm statistics; weights are carried over bit-exactly as
float32. Unsupported operators abort the export with every offender listed.
"""

from __future__ import annotations

import json
import operator
import os
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .formats import SfmNode, write_sfm, write_sft

SUPPORTED_NOTE = "supported: Conv2d, Linear, BatchNorm1d/2d, AvgPool2d, ReLU, Flatten, add"


class ExportError(Exception):
    """Checkpoint or dataset cannot be exported; message lists offenders."""


@dataclass
class ExportManifest:
    """Record of what went where during a checkpoint export."""

    source_framework: str
    source_version: str
    arch_hint: str | None
    mapping: dict[str, str] = field(default_factory=dict)  # source name -> node id
    tensors: dict[str, str] = field(default_factory=dict)  # source tensor -> node.field
    synthesized: list[str] = field(default_factory=list)  # tensors with no source param
    unconverted: list[dict] = field(default_factory=list)
    tensor_count: int = 0

    def to_json(self) -> dict:
        return {
            "source_framework": self.source_framework,
            "source_version": self.source_version,
            "arch_hint": self.arch_hint,
            "mapping": self.mapping,
            "tensors": self.tensors,
            "synthesized": self.synthesized,
            "unconverted": self.unconverted,
            "tensor_count": self.tensor_count,
        }


def _f32(tensor: torch.Tensor) -> np.ndarray:
    return tensor.detach().cpu().to(torch.float32).numpy()


def _pair(value) -> list[int]:
    if isinstance(value, (tuple, list)):
        return [int(value[0]), int(value[1])]
    return [int(value), int(value)]


def _convert_module(name, module, node_id, inputs, manifest: ExportManifest):
    """Translate one torch module into an SfmNode, or None for no-ops."""
    if isinstance(module, nn.Conv2d):
        if module.padding_mode != "zeros":
            raise ExportError(f"{name}: only zero padding is supported")
        if _pair(module.dilation) != [1, 1]:
            raise ExportError(f"{name}: dilation is not supported")
        weight = _f32(module.weight)
        bias = _f32(module.bias) if module.bias is not None else np.zeros(weight.shape[0], np.float32)
        manifest.tensors[f"{name}.weight"] = f"{node_id}.weight"
        if module.bias is not None:
            manifest.tensors[f"{name}.bias"] = f"{node_id}.bias"
        else:
            manifest.synthesized.append(f"{node_id}.bias (zeros)")
        return SfmNode(
            node_id,
            "Conv",
            inputs,
            attrs={
                "stride": _pair(module.stride),
                "padding": _pair(module.padding),
                "groups": int(module.groups),
            },
            tensors={"weight": weight, "bias": bias},
        )
    if isinstance(module, nn.Linear):
        weight = _f32(module.weight)
        bias = _f32(module.bias) if module.bias is not None else np.zeros(weight.shape[0], np.float32)
        manifest.tensors[f"{name}.weight"] = f"{node_id}.weight"
        if module.bias is not None:
            manifest.tensors[f"{name}.bias"] = f"{node_id}.bias"
        else:
            manifest.synthesized.append(f"{node_id}.bias (zeros)")
        return SfmNode(node_id, "Linear", inputs, tensors={"weight": weight, "bias": bias})
    if isinstance(module, (nn.BatchNorm1d, nn.BatchNorm2d)):
        if module.running_mean is None or module.running_var is None:
            raise ExportError(f"{name}: BatchNorm without running statistics")
        n_feat = module.running_mean.shape[0]
        gamma = _f32(module.weight) if module.affine else np.ones(n_feat, np.float32)
        beta = _f32(module.bias) if module.affine else np.zeros(n_feat, np.float32)
        if module.affine:
            manifest.tensors[f"{name}.weight"] = f"{node_id}.gamma"
            manifest.tensors[f"{name}.bias"] = f"{node_id}.beta"
        else:
            manifest.synthesized.append(f"{node_id}.gamma (ones)")
            manifest.synthesized.append(f"{node_id}.beta (zeros)")
        manifest.tensors[f"{name}.running_mean"] = f"{node_id}.running_mean"
        manifest.tensors[f"{name}.running_var"] = f"{node_id}.running_var"
        return SfmNode(
            node_id,
            "BatchNorm",
            inputs,
            attrs={"epsilon": float(module.eps)},
            tensors={
                "gamma": gamma,
                "beta": beta,
                "running_mean": _f32(module.running_mean),
                "running_var": _f32(module.running_var),
            },
        )
    if isinstance(module, nn.AvgPool2d):
        if _pair(module.padding) != [0, 0]:
            raise ExportError(f"{name}: padded average pooling is not supported")
        if module.ceil_mode:
            raise ExportError(f"{name}: ceil_mode pooling is not supported")
        stride = module.stride if module.stride is not None else module.kernel_size
        return SfmNode(
            node_id,
            "AvgPool",
            inputs,
            attrs={"kernel": _pair(module.kernel_size), "stride": _pair(stride)},
        )
    if isinstance(module, nn.ReLU):
        return SfmNode(node_id, "ReLU", inputs)
    if isinstance(module, nn.Flatten):
        if module.start_dim != 1 or module.end_dim != -1:
            raise ExportError(f"{name}: only full flatten from dim 1 is supported")
        return SfmNode(node_id, "Flatten", inputs)
    if isinstance(module, (nn.Dropout, nn.Identity)):
        manifest.unconverted.append(
            {"source": name, "kind": type(module).__name__, "reason": "inference no-op"}
        )
        return None
    raise ExportError(f"{name}: unsupported module {type(module).__name__} ({SUPPORTED_NOTE})")


_FLATTEN_FUNCS = (torch.flatten,)
_RELU_FUNCS = (torch.relu, torch.nn.functional.relu)
_ADD_FUNCS = (operator.add, torch.add)


def _trace_nodes(model: nn.Module, manifest: ExportManifest) -> list[SfmNode]:
    try:
        traced = torch.fx.symbolic_trace(model)
    except Exception as exc:
        raise ExportError(f"cannot trace checkpoint forward: {exc}") from exc

    modules = dict(traced.named_modules())
    nodes: list[SfmNode] = []
    alias: dict[str, str] = {}  # fx value name -> producing SFM node id
    offenders: list[str] = []

    def src(arg) -> str:
        return alias[arg.name]

    for fx_node in traced.graph.nodes:
        if fx_node.op == "placeholder":
            nodes.append(SfmNode("input", "Input", []))
            alias[fx_node.name] = "input"
        elif fx_node.op == "call_module":
            module = modules[fx_node.target]
            try:
                converted = _convert_module(
                    str(fx_node.target), module, fx_node.name, [src(fx_node.args[0])], manifest
                )
            except ExportError as exc:
                offenders.append(str(exc))
                alias[fx_node.name] = alias[fx_node.args[0].name]
                continue
            if converted is None:
                alias[fx_node.name] = src(fx_node.args[0])
            else:
                nodes.append(converted)
                alias[fx_node.name] = converted.id
                manifest.mapping[str(fx_node.target)] = converted.id
        elif fx_node.op == "call_function":
            if fx_node.target in _ADD_FUNCS and len(fx_node.args) == 2:
                nodes.append(SfmNode(fx_node.name, "Add", [src(fx_node.args[0]), src(fx_node.args[1])]))
                alias[fx_node.name] = fx_node.name
            elif fx_node.target in _FLATTEN_FUNCS:
                nodes.append(SfmNode(fx_node.name, "Flatten", [src(fx_node.args[0])]))
                alias[fx_node.name] = fx_node.name
            elif fx_node.target in _RELU_FUNCS:
                nodes.append(SfmNode(fx_node.name, "ReLU", [src(fx_node.args[0])]))
                alias[fx_node.name] = fx_node.name
            else:
                offenders.append(f"{fx_node.name}: unsupported function {fx_node.target}")
                alias[fx_node.name] = alias[fx_node.args[0].name]
        elif fx_node.op == "call_method":
            if fx_node.target == "flatten":
                nodes.append(SfmNode(fx_node.name, "Flatten", [src(fx_node.args[0])]))
                alias[fx_node.name] = fx_node.name
            else:
                offenders.append(f"{fx_node.name}: unsupported method .{fx_node.target}()")
                alias[fx_node.name] = alias[fx_node.args[0].name]
        elif fx_node.op == "output":
            arg = fx_node.args[0]
            nodes.append(SfmNode("output", "Output", [src(arg)]))
        elif fx_node.op == "get_attr":
            offenders.append(f"{fx_node.name}: free tensor attributes are not supported")
        else:
            offenders.append(f"{fx_node.name}: unsupported op {fx_node.op}")
    if offenders:
        raise ExportError("unsupported operations:\n  " + "\n  ".join(offenders))
    return nodes


def load_checkpoint(path) -> nn.Module:
    obj = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(obj, nn.Module):
        raise ExportError(
            f"{path}: expected a pickled torch module, got {type(obj).__name__}"
        )
    return obj.eval()


def export_checkpoint(
    src_path,
    out_path,
    input_shape,
    arch_hint: str | None = None,
    manifest_path=None,
) -> ExportManifest:
    """Export a pickled torch CNN to an SFM file plus an export manifest.

    BatchNorm statistics are exported raw; the consuming toolkit folds them.
    Max pooling and any other unsupported operator fails the whole export.
    """
    model = load_checkpoint(src_path)
    manifest = ExportManifest(
        source_framework="pytorch",
        source_version=torch.__version__,
        arch_hint=arch_hint,
    )
    nodes = _trace_nodes(model, manifest)

    class_count = None
    for node in reversed(nodes):
        if node.kind == "Linear":
            class_count = int(node.tensors["weight"].shape[0])
            break
    if class_count is None:
        raise ExportError("checkpoint has no Linear layer to read a class count from")

    metadata = {
        "input_shape": [int(d) for d in input_shape],
        "class_count": class_count,
        "version": 1,
    }
    manifest.tensor_count = write_sfm(out_path, nodes, metadata)
    if manifest.tensor_count != len(manifest.tensors) + len(manifest.synthesized):
        raise ExportError("internal accounting error: exported tensors not fully mapped")
    if manifest_path is None:
        manifest_path = os.fspath(out_path) + ".manifest.json"
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def _load_dataset(path):
    """Accept a torch .pt dict of images/labels or a directory of .npy files."""
    if os.path.isdir(path):
        images, labels = [], []
        classes = sorted(
            d for d in os.listdir(path) if os.path.isdir(os.path.join(path, d))
        )
        if not classes:
            raise ExportError(f"{path}: no class subdirectories found")
        for idx, cls in enumerate(classes):
            for name in sorted(os.listdir(os.path.join(path, cls))):
                if name.endswith(".npy"):
                    images.append(np.load(os.path.join(path, cls, name)))
                    labels.append(idx)
        if not images:
            raise ExportError(f"{path}: no .npy samples found")
        return np.stack(images).astype(np.float32), np.asarray(labels), len(classes)
    obj = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(obj, dict) or "images" not in obj or "labels" not in obj:
        raise ExportError(f"{path}: expected a dict with 'images' and 'labels'")
    images = obj["images"].to(torch.float32).numpy()
    labels = obj["labels"].numpy()
    return images, labels, int(labels.max()) + 1


def export_samples(
    dataset_path,
    out_path,
    count: int,
    preprocessing: dict | None = None,
    seed: int = 0,
    class_count: int | None = None,
) -> int:
    """Write the first `count` samples after a seeded shuffle as an SFT file.

    preprocessing supports scale (multiplied first), then per-channel mean
    and std: x -> (x * scale - mean) / std. Returns the sample count written.
    """
    images, labels, inferred = _load_dataset(dataset_path)
    if images.ndim == 3:
        images = images[:, None, :, :]
    if images.ndim != 4:
        raise ExportError(f"images must be rank 3 or 4, got shape {images.shape}")
    if count < 1 or count > images.shape[0]:
        raise ExportError(f"count {count} outside [1, {images.shape[0]}]")
    order = np.random.default_rng(seed).permutation(images.shape[0])[:count]
    picked = np.ascontiguousarray(images[order]).astype(np.float32)
    chosen_labels = labels[order]

    pre = preprocessing or {}
    if pre.get("scale") is not None:
        picked = picked * np.float32(pre["scale"])
    if pre.get("mean") is not None:
        mean = np.asarray(pre["mean"], np.float32).reshape(1, -1, 1, 1)
        picked = picked - mean
    if pre.get("std") is not None:
        std = np.asarray(pre["std"], np.float32).reshape(1, -1, 1, 1)
        picked = picked / std
    write_sft(out_path, picked, chosen_labels, class_count or inferred)
    return count
