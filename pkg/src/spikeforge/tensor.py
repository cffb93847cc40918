"""Dense NCHW tensors and the numerical kernels the toolkit is built on.

Values are float32 ndarrays, rank <= 4 (N,C,H,W order; rank 2 means N,F).
Kernels accumulate in float64 with a fixed summation order so repeated runs
are bit-identical regardless of thread count, then cast back to float32.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DTYPE = np.float32

# Value carrier: a float32 ndarray, rank 1..4, N-C-H-W (or N-F) order.
Tensor = np.ndarray


def tensor(data, shape=None) -> np.ndarray:
    """Build a validated float32 tensor from array-like data."""
    arr = np.asarray(data, dtype=DTYPE)
    if shape is not None:
        arr = arr.reshape(shape)
    check_tensor(arr)
    return np.ascontiguousarray(arr)


def check_tensor(x: np.ndarray, rank: int | None = None, name: str = "tensor") -> None:
    """Validate rank, dtype and finiteness of a value carrier."""
    if not isinstance(x, np.ndarray):
        raise ValueError(f"{name} must be an ndarray, got {type(x).__name__}")
    if x.dtype != DTYPE:
        raise ValueError(f"{name} must be float32, got {x.dtype}")
    if x.ndim == 0 or x.ndim > 4:
        raise ValueError(f"{name} rank must be 1..4, got {x.ndim}")
    if rank is not None and x.ndim != rank:
        raise ValueError(f"{name} must have rank {rank}, got {x.ndim}")
    if not np.isfinite(x).all():
        raise ValueError(f"{name} contains non-finite values")


@dataclass
class ConvParams:
    """Parameters of a 2D cross-correlation layer."""

    weight: np.ndarray  # [O, I/groups, Kh, Kw]
    bias: np.ndarray  # [O]
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    groups: int = 1

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=DTYPE)
        self.bias = np.asarray(self.bias, dtype=DTYPE)
        check_tensor(self.weight, rank=4, name="conv weight")
        check_tensor(self.bias, rank=1, name="conv bias")
        self.stride = (int(self.stride[0]), int(self.stride[1]))
        self.padding = (int(self.padding[0]), int(self.padding[1]))
        self.groups = int(self.groups)
        out_ch = self.weight.shape[0]
        if self.bias.shape[0] != out_ch:
            raise ValueError(
                f"bias length {self.bias.shape[0]} != output channels {out_ch}"
            )
        if self.groups < 1 or out_ch % self.groups != 0:
            raise ValueError(f"groups {self.groups} must divide output channels {out_ch}")
        if self.stride[0] < 1 or self.stride[1] < 1:
            raise ValueError("stride extents must be >= 1")
        if self.padding[0] < 0 or self.padding[1] < 0:
            raise ValueError("padding must be >= 0")

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        """Output spatial extents; raises when they are not positive integers."""
        kh, kw = self.weight.shape[2], self.weight.shape[3]
        sh, sw = self.stride
        ph, pw = self.padding
        num_h = h + 2 * ph - kh
        num_w = w + 2 * pw - kw
        if num_h < 0 or num_w < 0 or num_h % sh != 0 or num_w % sw != 0:
            raise ValueError(
                f"conv geometry invalid: input {h}x{w}, kernel {kh}x{kw}, "
                f"stride {self.stride}, padding {self.padding}"
            )
        return num_h // sh + 1, num_w // sw + 1


def _pad_nchw(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), mode="constant")


def conv2d_forward(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """2D cross-correlation with zero padding.

    Accumulation runs input-channel by input-channel, kernel row-major inside
    each channel, so every output element sums its terms in the same order on
    every run.
    """
    check_tensor(x, rank=4, name="conv input")
    n, ci, h, w = x.shape
    if ci != p.in_channels:
        raise ValueError(f"input channels {ci} != expected {p.in_channels}")
    oh, ow = p.out_hw(h, w)
    o = p.out_channels
    kh, kw = p.weight.shape[2], p.weight.shape[3]
    sh, sw = p.stride
    ig = ci // p.groups
    og = o // p.groups

    xp = _pad_nchw(x, p.padding[0], p.padding[1]).astype(np.float64)
    wt = p.weight.astype(np.float64)
    out = np.zeros((n, o, oh, ow), dtype=np.float64)
    out += p.bias.astype(np.float64)[None, :, None, None]
    for g in range(p.groups):
        xg = xp[:, g * ig : (g + 1) * ig]
        wg = wt[g * og : (g + 1) * og]
        og_slice = out[:, g * og : (g + 1) * og]
        for ic in range(ig):
            for r in range(kh):
                for c in range(kw):
                    patch = xg[:, ic, r : r + sh * oh : sh, c : c + sw * ow : sw]
                    og_slice += wg[:, ic, r, c][None, :, None, None] * patch[:, None]
    return out.astype(DTYPE)


def conv2d_weight_grad(
    x: np.ndarray, grad_out: np.ndarray, p: ConvParams
) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of L = sum(grad_out * conv2d_forward(x, p)) wrt weight and bias."""
    check_tensor(x, rank=4, name="conv input")
    check_tensor(grad_out, rank=4, name="grad_out")
    n, ci, h, w = x.shape
    if ci != p.in_channels:
        raise ValueError(f"input channels {ci} != expected {p.in_channels}")
    oh, ow = p.out_hw(h, w)
    if grad_out.shape != (n, p.out_channels, oh, ow):
        raise ValueError(
            f"grad_out shape {grad_out.shape} != forward output "
            f"{(n, p.out_channels, oh, ow)}"
        )
    kh, kw = p.weight.shape[2], p.weight.shape[3]
    sh, sw = p.stride
    ig = ci // p.groups
    og = p.out_channels // p.groups

    xp = _pad_nchw(x, p.padding[0], p.padding[1]).astype(np.float64)
    go = grad_out.astype(np.float64)
    dw = np.zeros(p.weight.shape, dtype=np.float64)
    for g in range(p.groups):
        xg = xp[:, g * ig : (g + 1) * ig]
        gg = go[:, g * og : (g + 1) * og]
        for ic in range(ig):
            for r in range(kh):
                for c in range(kw):
                    patch = xg[:, ic, r : r + sh * oh : sh, c : c + sw * ow : sw]
                    dw[g * og : (g + 1) * og, ic, r, c] = np.sum(
                        gg * patch[:, None], axis=(0, 2, 3)
                    )
    db = np.sum(go, axis=(0, 2, 3))
    return dw.astype(DTYPE), db.astype(DTYPE)


def linear_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """y[n, o] = sum_i weight[o, i] * x[n, i] + bias[o], summed in index order."""
    check_tensor(x, rank=2, name="linear input")
    check_tensor(weight, rank=2, name="linear weight")
    check_tensor(bias, rank=1, name="linear bias")
    o, i = weight.shape
    if x.shape[1] != i:
        raise ValueError(f"input features {x.shape[1]} != weight features {i}")
    if bias.shape[0] != o:
        raise ValueError(f"bias length {bias.shape[0]} != output features {o}")
    xd = x.astype(np.float64)
    wd = weight.astype(np.float64)
    out = np.zeros((x.shape[0], o), dtype=np.float64)
    out += bias.astype(np.float64)[None, :]
    for k in range(i):
        out += xd[:, k : k + 1] * wd[:, k][None, :]
    return out.astype(DTYPE)


def linear_weight_grad(
    x: np.ndarray, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of L = sum(grad_out * (x @ W.T + b)) wrt weight and bias."""
    check_tensor(x, rank=2, name="linear input")
    check_tensor(grad_out, rank=2, name="grad_out")
    if grad_out.shape[0] != x.shape[0]:
        raise ValueError("batch size mismatch between x and grad_out")
    gd = grad_out.astype(np.float64)
    xd = x.astype(np.float64)
    dw = gd.T @ xd
    db = np.sum(gd, axis=0)
    return dw.astype(DTYPE), db.astype(DTYPE)


def relu(x: np.ndarray) -> np.ndarray:
    """Elementwise max(0, x)."""
    check_tensor(x, name="relu input")
    return np.maximum(x, DTYPE(0))


def avg_pool2d(x: np.ndarray, kernel: tuple[int, int], stride: tuple[int, int]) -> np.ndarray:
    """Average pooling, computed as sum of window slices times 1/(kH*kW).

    The accumulation order matches a depthwise conv2d_forward with a constant
    1/(kH*kW) kernel, so the two paths agree bit-for-bit.
    """
    check_tensor(x, rank=4, name="pool input")
    kh, kw = int(kernel[0]), int(kernel[1])
    sh, sw = int(stride[0]), int(stride[1])
    if kh < 1 or kw < 1:
        raise ValueError("pool kernel extents must be >= 1")
    n, c, h, w = x.shape
    if (h - kh) % sh != 0 or (w - kw) % sw != 0 or h < kh or w < kw:
        raise ValueError(
            f"pool geometry invalid: input {h}x{w}, kernel {kh}x{kw}, stride {(sh, sw)}"
        )
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    # Same float32-rounded constant an equivalent depthwise conv kernel holds.
    inv = np.float64(DTYPE(1.0) / DTYPE(kh * kw))
    xd = x.astype(np.float64)
    out = np.zeros((n, c, oh, ow), dtype=np.float64)
    for r in range(kh):
        for col in range(kw):
            out += inv * xd[:, :, r : r + sh * oh : sh, col : col + sw * ow : sw]
    return out.astype(DTYPE)


def channel_spatial_mean(x: np.ndarray, batch_reduce: bool = True) -> np.ndarray:
    """Per-channel spatial mean; optionally averaged over the batch too.

    Rank-4 input gives [N, C] means (or [C] with batch_reduce). Rank-2 input
    returns the per-feature batch mean.
    """
    check_tensor(x, name="mean input")
    if x.ndim == 4:
        per_sample = np.mean(x.astype(np.float64), axis=(2, 3))
        if batch_reduce:
            return np.mean(per_sample, axis=0).astype(DTYPE)
        return per_sample.astype(DTYPE)
    if x.ndim == 2:
        return np.mean(x.astype(np.float64), axis=0).astype(DTYPE)
    raise ValueError(f"expected rank 2 or 4, got rank {x.ndim}")


def batch_mean(x: np.ndarray) -> np.ndarray:
    """Mean over the batch dimension only; keeps full per-neuron resolution."""
    check_tensor(x, name="mean input")
    return np.mean(x.astype(np.float64), axis=0).astype(DTYPE)
