"""Standalone SFM/SFT writers.

These mirror the consuming toolkit's container formats byte for byte: SFM is
magic + u32 version + u64 manifest length + canonical JSON manifest + a blob
of little-endian float32 tensors; SFT is a fixed header followed by images
and u32 labels.
"""

from __future__ import annotations

import json
import struct

import numpy as np

SFM_MAGIC = b"SFM1"
SFT_MAGIC = b"SFT1"
FORMAT_VERSION = 1

TENSOR_FIELDS = {
    "Conv": ("weight", "bias"),
    "Linear": ("weight", "bias"),
    "BatchNorm": ("gamma", "beta", "running_mean", "running_var"),
}


class SfmNode:
    """One manifest node plus its named tensors, in blob order."""

    def __init__(self, node_id, kind, inputs, attrs=None, tensors=None):
        self.id = node_id
        self.kind = kind
        self.inputs = list(inputs)
        self.attrs = dict(attrs or {})
        self.tensors = dict(tensors or {})


def write_sfm(path, nodes: list[SfmNode], metadata: dict) -> int:
    """Write the model container; returns the number of tensors emitted."""
    chunks = []
    offset = 0
    node_recs = []
    count = 0
    for node in nodes:
        rec = {"id": node.id, "kind": node.kind, "inputs": node.inputs}
        rec.update(node.attrs)
        fields = TENSOR_FIELDS.get(node.kind, ())
        if fields:
            rec["tensors"] = {}
            for name in fields:
                arr = np.ascontiguousarray(node.tensors[name], dtype="<f4")
                rec["tensors"][name] = {"shape": list(arr.shape), "offset": offset}
                chunks.append(arr.tobytes())
                offset += arr.nbytes
                count += 1
        node_recs.append(rec)
    manifest = {
        "format": "SFM",
        "version": FORMAT_VERSION,
        "metadata": metadata,
        "nodes": node_recs,
        "blob_bytes": offset,
    }
    payload = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(SFM_MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        fh.write(b"".join(chunks))
    return count


def write_sft(path, images: np.ndarray, labels: np.ndarray, class_count: int) -> None:
    images = np.ascontiguousarray(images, dtype="<f4")
    if images.ndim != 4:
        raise ValueError(f"images must be [N,C,H,W], got shape {images.shape}")
    labels = np.asarray(labels)
    if labels.shape != (images.shape[0],):
        raise ValueError("labels must be one integer per image")
    if labels.min() < 0 or labels.max() >= class_count:
        raise ValueError("labels must lie in [0, class_count)")
    n, c, h, w = images.shape
    with open(path, "wb") as fh:
        fh.write(SFT_MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<IIII", n, c, h, w))
        fh.write(struct.pack("<I", class_count))
        fh.write(images.tobytes())
        fh.write(labels.astype("<u4").tobytes())
