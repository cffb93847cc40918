"""Sample-set ingestion (SFT files) and the committed desk-scale fixtures."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .errors import (
    BadMagicError,
    TruncatedFileError,
    VersionMismatchError,
)
from .model_io import load_model
from .tensor import DTYPE, check_tensor

SFT_MAGIC = b"SFT1"
SFT_VERSION = 1

FIXTURE_KINDS = ("two-moons-conv", "blob-mlp")
_FIXTURE_FILES = {"two-moons-conv": "two_moons_conv", "blob-mlp": "blob_mlp"}


@dataclass
class SampleSet:
    """Labeled image batch plus the provenance of its randomness."""

    images: np.ndarray  # [N, C, H, W] float32
    labels: np.ndarray  # [N] integers in [0, class_count)
    class_count: int
    seed: int | None = None
    generator: str = ""

    def __post_init__(self):
        check_tensor(self.images, rank=4, name="images")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1 or self.labels.shape[0] != self.images.shape[0]:
            raise ValueError("labels must be one integer per image")
        if self.images.shape[0] < 1:
            raise ValueError("sample set must hold at least one sample")
        if self.class_count < 1:
            raise ValueError("class_count must be >= 1")
        if np.any(self.labels < 0) or np.any(self.labels >= self.class_count):
            raise ValueError("labels must lie in [0, class_count)")

    def __len__(self) -> int:
        return self.images.shape[0]


def save_samples(samples: SampleSet, path) -> None:
    """Write an SFT file: header, float32 image block, u32 label block."""
    n, c, h, w = samples.images.shape
    with open(path, "wb") as fh:
        fh.write(SFT_MAGIC)
        fh.write(struct.pack("<I", SFT_VERSION))
        fh.write(struct.pack("<IIII", n, c, h, w))
        fh.write(struct.pack("<I", samples.class_count))
        fh.write(np.ascontiguousarray(samples.images, dtype="<f4").tobytes())
        fh.write(samples.labels.astype("<u4").tobytes())


def load_samples(path) -> SampleSet:
    """Read an SFT file; exact round trip with save_samples."""
    with open(path, "rb") as fh:
        raw = fh.read()
    header = 4 + 4 + 16 + 4
    if len(raw) < header:
        raise TruncatedFileError(f"{path}: file shorter than SFT header")
    if raw[:4] != SFT_MAGIC:
        raise BadMagicError(f"{path}: magic {raw[:4]!r} != {SFT_MAGIC!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != SFT_VERSION:
        raise VersionMismatchError(f"{path}: version {version} != {SFT_VERSION}")
    n, c, h, w = struct.unpack_from("<IIII", raw, 8)
    (class_count,) = struct.unpack_from("<I", raw, 24)
    img_bytes = n * c * h * w * 4
    need = header + img_bytes + n * 4
    if len(raw) < need:
        raise TruncatedFileError(f"{path}: need {need} bytes, file holds {len(raw)}")
    if len(raw) > need:
        raise TruncatedFileError(f"{path}: {len(raw) - need} trailing bytes")
    images = (
        np.frombuffer(raw, dtype="<f4", count=n * c * h * w, offset=header)
        .reshape(n, c, h, w)
        .astype(DTYPE)
    )
    labels = np.frombuffer(raw, dtype="<u4", count=n, offset=header + img_bytes).astype(np.int64)
    return SampleSet(images=images, labels=labels, class_count=int(class_count))


def generate_two_moons_images(rng: np.random.Generator, n: int):
    """Render two interleaved crescents as 8x8 bump images.

    A small fraction of samples carries a 3x-intensity bump; those outliers
    are what make naive max-activation thresholds collapse at low T.
    """
    labels = rng.integers(0, 2, size=n)
    t = rng.uniform(0.0, np.pi, size=n)
    noise = rng.normal(0.0, 0.40, size=(n, 2))
    xy = np.empty((n, 2))
    outer = labels == 0
    xy[outer, 0] = np.cos(t[outer])
    xy[outer, 1] = np.sin(t[outer])
    xy[~outer, 0] = 1.0 - np.cos(t[~outer])
    xy[~outer, 1] = 0.5 - np.sin(t[~outer])
    xy += noise
    # map x in [-1.5, 2.5], y in [-1.0, 1.5] onto the 8x8 pixel grid
    px = (xy[:, 0] + 1.5) / 4.0 * 7.0
    py = (xy[:, 1] + 1.0) / 2.5 * 7.0
    amp = np.ones(n)
    amp[rng.uniform(size=n) < 0.02] = 2.0
    ii = np.arange(8.0)
    gy = np.exp(-((ii[None, :] - py[:, None]) ** 2) / (2 * 0.65**2))
    gx = np.exp(-((ii[None, :] - px[:, None]) ** 2) / (2 * 0.65**2))
    images = (amp[:, None, None] * gy[:, :, None] * gx[:, None, :]).astype(DTYPE)
    return images[:, None, :, :], labels.astype(np.int64)


def generate_blob_images(rng: np.random.Generator, n: int, centers: np.ndarray):
    """Gaussian blobs around fixed 16-dim centers, shaped as [1, 2, 8] images."""
    k = centers.shape[0]
    labels = rng.integers(0, k, size=n)
    feats = centers[labels] + rng.normal(0.0, 0.55, size=(n, 16))
    images = np.maximum(feats, 0.0).astype(DTYPE).reshape(n, 1, 2, 8)
    return images, labels.astype(np.int64)


def blob_centers(seed: int = 7) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.uniform(0.4, 2.4, size=(4, 16))


def generate_samples(kind: str, seed: int, n: int) -> SampleSet:
    """Synthetic sample set for a fixture kind; bit-identical per seed."""
    rng = np.random.default_rng(seed)
    if kind == "two-moons-conv":
        images, labels = generate_two_moons_images(rng, n)
        return SampleSet(images, labels, class_count=2, seed=seed, generator=kind)
    if kind == "blob-mlp":
        images, labels = generate_blob_images(rng, n, blob_centers())
        return SampleSet(images, labels, class_count=4, seed=seed, generator=kind)
    raise ValueError(f"unknown fixture kind {kind!r}")


def _fixture_path(kind: str, suffix: str):
    stem = _FIXTURE_FILES[kind]
    return resources.files("spikeforge").joinpath(f"fixtures/{stem}{suffix}")


def fixture_manifest(kind: str) -> dict:
    if kind not in _FIXTURE_FILES:
        raise ValueError(f"unknown fixture kind {kind!r}")
    with resources.as_file(_fixture_path(kind, ".json")) as path:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)


def make_fixture(kind: str, seed: int | None = None):
    """Committed pretrained toy network plus seeded synthetic train/test sets.

    Weights are fixed repository artifacts; only the samples depend on the
    seed. Returns (graph, train, test).
    """
    manifest = fixture_manifest(kind)
    if seed is None:
        seed = int(manifest["canonical_seed"])
    with resources.as_file(_fixture_path(kind, ".sfm")) as path:
        graph = load_model(path)
    train = generate_samples(kind, seed, int(manifest["n_train"]))
    test = generate_samples(kind, seed + 1, int(manifest["n_test"]))
    return graph, train, test


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Top-1 accuracy in percent."""
    pred = np.argmax(logits, axis=1)
    return float(np.mean(pred == labels) * 100.0)
