"""SFM model files and the shared manifest+blob container framing.

Layout: 4-byte magic, little-endian u32 version, little-endian u64 manifest
length, UTF-8 JSON manifest, then one blob of little-endian float32 values.
Tensor order in the blob matches manifest order; offsets are byte positions
into the blob.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import (
    BadMagicError,
    BlobSizeMismatchError,
    ManifestError,
    TruncatedFileError,
    VersionMismatchError,
)
from .graph import (
    AvgPoolParams,
    BatchNormParams,
    LayerNode,
    LinearParams,
    NetworkGraph,
)
from .tensor import DTYPE, ConvParams

SFM_MAGIC = b"SFM1"
SFB_MAGIC = b"SFB1"
FORMAT_VERSION = 1

_TENSOR_FIELDS = {
    "Conv": ("weight", "bias"),
    "Linear": ("weight", "bias"),
    "BatchNorm": ("gamma", "beta", "running_mean", "running_var"),
}


def write_container(path, magic: bytes, manifest: dict, blob: bytes) -> None:
    payload = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        fh.write(blob)


def read_container(path, magic: bytes) -> tuple[dict, bytes]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16:
        raise TruncatedFileError(f"{path}: file shorter than header")
    if raw[:4] != magic:
        raise BadMagicError(f"{path}: magic {raw[:4]!r} != {magic!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: version {version} != {FORMAT_VERSION}")
    (manifest_len,) = struct.unpack_from("<Q", raw, 8)
    if 16 + manifest_len > len(raw):
        raise TruncatedFileError(f"{path}: manifest declared {manifest_len} bytes, file too short")
    try:
        manifest = json.loads(raw[16 : 16 + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ManifestError(f"{path}: manifest is not valid JSON: {exc}") from exc
    return manifest, raw[16 + manifest_len :]


class _BlobWriter:
    def __init__(self):
        self.chunks: list[bytes] = []
        self.offset = 0

    def add(self, arr: np.ndarray) -> dict:
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entry = {"shape": list(arr.shape), "offset": self.offset}
        self.chunks.append(data)
        self.offset += len(data)
        return entry

    def blob(self) -> bytes:
        return b"".join(self.chunks)


def _read_tensor(blob: bytes, entry: dict, path) -> np.ndarray:
    shape = tuple(int(d) for d in entry["shape"])
    count = int(np.prod(shape)) if shape else 1
    offset = int(entry["offset"])
    end = offset + 4 * count
    if offset < 0 or end > len(blob):
        raise BlobSizeMismatchError(
            f"{path}: tensor needs bytes [{offset}, {end}) but blob has {len(blob)}"
        )
    arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
    return arr.reshape(shape).astype(DTYPE)


def save_model(g: NetworkGraph, path) -> None:
    """Write a NetworkGraph as an SFM file."""
    writer = _BlobWriter()
    nodes_out = []
    for node in g.nodes:
        rec: dict = {"id": node.id, "kind": node.kind, "inputs": list(node.inputs)}
        if node.kind == "Conv":
            p: ConvParams = node.params
            rec["stride"] = list(p.stride)
            rec["padding"] = list(p.padding)
            rec["groups"] = p.groups
        elif node.kind == "BatchNorm":
            rec["epsilon"] = node.params.epsilon
        elif node.kind == "AvgPool":
            rec["kernel"] = list(node.params.kernel)
            rec["stride"] = list(node.params.stride)
        fields = _TENSOR_FIELDS.get(node.kind)
        if fields:
            rec["tensors"] = {name: writer.add(getattr(node.params, name)) for name in fields}
        nodes_out.append(rec)
    manifest = {
        "format": "SFM",
        "version": FORMAT_VERSION,
        "metadata": _jsonable_metadata(g.metadata),
        "nodes": nodes_out,
        "blob_bytes": writer.offset,
    }
    write_container(path, SFM_MAGIC, manifest, writer.blob())


def load_model(path) -> NetworkGraph:
    """Read an SFM file back into a NetworkGraph."""
    manifest, blob = read_container(path, SFM_MAGIC)
    declared = manifest.get("blob_bytes")
    if declared is not None and declared != len(blob):
        raise BlobSizeMismatchError(
            f"{path}: manifest declares {declared} blob bytes, file holds {len(blob)}"
        )
    try:
        node_recs = manifest["nodes"]
        metadata = manifest.get("metadata", {})
    except (TypeError, KeyError) as exc:
        raise ManifestError(f"{path}: manifest missing nodes") from exc
    nodes = []
    for rec in node_recs:
        try:
            kind = rec["kind"]
            node_id = rec["id"]
            inputs = list(rec["inputs"])
        except (TypeError, KeyError) as exc:
            raise ManifestError(f"{path}: node record malformed: {rec!r}") from exc
        if kind in ("MaxPool", "MaxPool2d"):
            raise ManifestError(f"{path}: {node_id}: max pooling is not supported")
        tensors = {
            name: _read_tensor(blob, entry, path)
            for name, entry in rec.get("tensors", {}).items()
        }
        try:
            params = _build_params(kind, rec, tensors)
        except (KeyError, ValueError) as exc:
            raise ManifestError(f"{path}: {node_id}: bad parameters: {exc}") from exc
        nodes.append(LayerNode(id=node_id, kind=kind, inputs=inputs, params=params))
    return NetworkGraph(nodes=nodes, metadata=dict(metadata))


def _build_params(kind: str, rec: dict, tensors: dict):
    if kind == "Conv":
        return ConvParams(
            tensors["weight"],
            tensors["bias"],
            stride=tuple(rec["stride"]),
            padding=tuple(rec["padding"]),
            groups=rec.get("groups", 1),
        )
    if kind == "Linear":
        return LinearParams(tensors["weight"], tensors["bias"])
    if kind == "BatchNorm":
        return BatchNormParams(
            tensors["gamma"],
            tensors["beta"],
            tensors["running_mean"],
            tensors["running_var"],
            epsilon=rec["epsilon"],
        )
    if kind == "AvgPool":
        return AvgPoolParams(kernel=tuple(rec["kernel"]), stride=tuple(rec["stride"]))
    return None


def _jsonable_metadata(metadata: dict) -> dict:
    out = {}
    for key, value in metadata.items():
        if isinstance(value, (tuple, list)):
            out[key] = [int(v) if isinstance(v, (int, np.integer)) else v for v in value]
        elif isinstance(value, (np.integer,)):
            out[key] = int(value)
        elif isinstance(value, (np.floating,)):
            out[key] = float(value)
        else:
            out[key] = value
    return out


def save_tensor_map(values: dict[str, np.ndarray], path) -> None:
    """Write a {layer id -> tensor} map as an SFB file (same framing as SFM)."""
    writer = _BlobWriter()
    entries = {key: writer.add(np.asarray(arr, dtype=DTYPE)) for key, arr in sorted(values.items())}
    manifest = {
        "format": "SFB",
        "version": FORMAT_VERSION,
        "entries": entries,
        "blob_bytes": writer.offset,
    }
    write_container(path, SFB_MAGIC, manifest, writer.blob())


def load_tensor_map(path) -> dict[str, np.ndarray]:
    manifest, blob = read_container(path, SFB_MAGIC)
    declared = manifest.get("blob_bytes")
    if declared is not None and declared != len(blob):
        raise BlobSizeMismatchError(
            f"{path}: manifest declares {declared} blob bytes, file holds {len(blob)}"
        )
    try:
        entries = manifest["entries"]
    except (TypeError, KeyError) as exc:
        raise ManifestError(f"{path}: manifest missing entries") from exc
    return {key: _read_tensor(blob, entry, path) for key, entry in entries.items()}
