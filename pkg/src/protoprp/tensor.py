"""Dense float32 tensor primitives and the forward layers of the backbone.

Tensors are plain ``numpy.ndarray`` objects. Single images are laid out
``[C, H, W]``; the batched helpers used by training take ``[B, C, H, W]``.
Every public forward op returns a fresh array and never mutates its input.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ShapeError",
    "ConvLayer",
    "PoolArgmax",
    "conv2d_forward",
    "conv2d_backward_input",
    "conv2d_backward_weights",
    "maxpool2d_forward",
    "maxpool2d_backward",
    "relu",
    "linear_forward",
    "bilinear_upsample",
    "resize_bilinear",
]


class ShapeError(ValueError):
    """Raised when tensor dimensions do not fit an operation."""


def _check_finite(x: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(x).all():
        raise FloatingPointError(f"{op}: produced non-finite values")
    return x


@dataclass
class ConvLayer:
    weights: np.ndarray  # [outC, inC, kH, kW]
    bias: np.ndarray  # [outC]
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        self.weights = np.asarray(self.weights)
        self.bias = np.asarray(self.bias)
        if self.weights.ndim != 4:
            raise ShapeError(f"conv weights must be rank 4, got shape {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"conv bias shape {self.bias.shape} does not match outC={self.weights.shape[0]}"
            )
        if self.stride < 1 or self.padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def kernel(self) -> tuple[int, int]:
        return self.weights.shape[2], self.weights.shape[3]

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel
        ho = (h + 2 * self.padding - kh) // self.stride + 1
        wo = (w + 2 * self.padding - kw) // self.stride + 1
        return ho, wo


@dataclass
class PoolArgmax:
    """Winning flat input index (within its channel plane) of every pooled cell.

    ``indices`` has the pooled output shape; ``input_shape`` is the shape of the
    tensor that was pooled.
    """

    indices: np.ndarray
    input_shape: tuple[int, ...]
    window: int
    stride: int


def _as_batch(x: np.ndarray, op: str) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"{op}: expected rank 3 [C,H,W] or rank 4 [B,C,H,W], got shape {x.shape}")


def _conv_windows(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """Patch view [B, C, Ho, Wo, kH, kW] of a batch."""
    p = layer.padding
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    kh, kw = layer.kernel
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, :: layer.stride, :: layer.stride]


def conv2d_forward(input: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """Cross-correlation of ``input`` with ``layer`` plus bias.

    Accepts ``[inC, H, W]`` or a batch ``[B, inC, H, W]``.
    """
    x, single = _as_batch(input, "conv2d_forward")
    if x.shape[1] != layer.in_channels:
        raise ShapeError(
            f"conv2d_forward: input has {x.shape[1]} channels, layer expects {layer.in_channels}"
        )
    kh, kw = layer.kernel
    h, w = x.shape[2] + 2 * layer.padding, x.shape[3] + 2 * layer.padding
    if h < kh or w < kw:
        raise ShapeError(
            f"conv2d_forward: padded input {h}x{w} smaller than kernel {kh}x{kw}"
        )
    win = _conv_windows(x, layer)
    out = np.tensordot(win, layer.weights, axes=([1, 4, 5], [1, 2, 3]))  # [B,Ho,Wo,O]
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2)) + layer.bias[None, :, None, None]
    out = out.astype(np.result_type(x.dtype, layer.weights.dtype), copy=False)
    _check_finite(out, "conv2d_forward")
    return out[0] if single else out


def conv2d_backward_input(
    grad_out: np.ndarray, weights: np.ndarray, input_shape, stride: int = 1, padding: int = 0
) -> np.ndarray:
    """Transpose convolution: gradient of a bias-free conv w.r.t. its input.

    ``grad_out`` is ``[O, Ho, Wo]`` or ``[B, O, Ho, Wo]``; ``input_shape`` the
    matching unbatched ``(C, H, W)``.
    """
    g, single = _as_batch(grad_out, "conv2d_backward_input")
    c, h, w = input_shape[-3:]
    kh, kw = weights.shape[2:]
    ho, wo = g.shape[2], g.shape[3]
    dx = np.zeros((g.shape[0], c, h + 2 * padding, w + 2 * padding), dtype=np.result_type(g, weights))
    for i in range(kh):
        for j in range(kw):
            # [B,O,Ho,Wo] x [O,C] -> [B,C,Ho,Wo]
            contrib = np.tensordot(g, weights[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
            dx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += contrib
    if padding:
        dx = dx[:, :, padding:-padding, padding:-padding]
    dx = np.ascontiguousarray(dx)
    return dx[0] if single else dx


def conv2d_backward_weights(grad_out: np.ndarray, input: np.ndarray, layer: ConvLayer):
    """Gradients of a batched conv w.r.t. its weights and bias."""
    win = _conv_windows(input, layer)  # [B,C,Ho,Wo,kh,kw]
    dw = np.tensordot(grad_out, win, axes=([0, 2, 3], [0, 2, 3]))  # [O,C,kh,kw]
    db = grad_out.sum(axis=(0, 2, 3))
    return dw, db


def maxpool2d_forward(input: np.ndarray, window: int, stride: int):
    """Max pooling without padding.

    Returns the pooled tensor and a :class:`PoolArgmax`; ties go to the first
    cell of the window in row-major order.
    """
    if window < 1 or stride < 1:
        raise ValueError("maxpool2d_forward: window and stride must be >= 1")
    x, single = _as_batch(input, "maxpool2d_forward")
    b, c, h, w = x.shape
    if window > h or window > w:
        raise ShapeError(f"maxpool2d_forward: window {window} larger than input {h}x{w}")
    ho, wo = (h - window) // stride + 1, (w - window) // stride + 1
    cands = [
        x[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
        for i in range(window)
        for j in range(window)
    ]
    out = cands[0]
    for cand in cands[1:]:
        out = np.maximum(out, cand)
    # first offset (row-major) attaining the max wins ties
    local = np.full(out.shape, len(cands) - 1, np.int32)
    for t in range(len(cands) - 2, -1, -1):
        np.copyto(local, np.int32(t), where=cands[t] == out)
    rows = np.arange(ho, dtype=np.int32)[:, None] * stride + local // window
    cols = np.arange(wo, dtype=np.int32)[None, :] * stride + local % window
    idx = rows * w + cols
    if single:
        return np.ascontiguousarray(out[0]), PoolArgmax(idx[0], (c, h, w), window, stride)
    return np.ascontiguousarray(out), PoolArgmax(idx, (b, c, h, w), window, stride)


def maxpool2d_backward(grad_out: np.ndarray, argmax: PoolArgmax) -> np.ndarray:
    """Route each pooled cell's value back to its recorded winner (summing overlaps)."""
    shape = argmax.input_shape
    h, w = shape[-2], shape[-1]
    lead = int(np.prod(shape[:-2]))
    dx = np.zeros((lead, h * w), dtype=grad_out.dtype)
    g = grad_out.reshape(lead, -1)
    idx = argmax.indices.reshape(lead, -1)
    rows = np.repeat(np.arange(lead), idx.shape[1])
    np.add.at(dx, (rows, idx.ravel()), g.ravel())
    return dx.reshape(shape)


def relu(input: np.ndarray) -> np.ndarray:
    return np.maximum(input, 0).astype(np.asarray(input).dtype, copy=False)


def linear_forward(input: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """``weights @ input + bias`` for a vector or a batch of row vectors."""
    x = np.asarray(input)
    if weights.ndim != 2 or x.shape[-1] != weights.shape[1] or bias.shape != (weights.shape[0],):
        raise ShapeError(
            f"linear_forward: input {x.shape}, weights {weights.shape}, bias {bias.shape} mismatch"
        )
    out = x @ weights.T + bias
    return _check_finite(out, "linear_forward")


def _interp_axis(n_src: int, n_dst: int):
    """Corner-aligned source coordinates: lower index, upper index, fraction."""
    if n_dst == 1 or n_src == 1:
        pos = np.zeros(n_dst)
    else:
        pos = np.arange(n_dst) * ((n_src - 1) / (n_dst - 1))
    lo = np.clip(np.floor(pos).astype(np.int64), 0, n_src - 1)
    hi = np.minimum(lo + 1, n_src - 1)
    return lo, hi, pos - lo


def resize_bilinear(input: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Corner-aligned bilinear resampling of the last two axes (up or down)."""
    x = np.asarray(input)
    if x.ndim < 2:
        raise ShapeError(f"resize_bilinear: need at least rank 2, got {x.shape}")
    th, tw = target
    if th < 1 or tw < 1:
        raise ShapeError(f"resize_bilinear: invalid target {target}")
    y0, y1, fy = _interp_axis(x.shape[-2], th)
    x0, x1, fx = _interp_axis(x.shape[-1], tw)
    xd = x.astype(np.float64)
    top = xd[..., y0, :] * (1 - fy)[:, None] + xd[..., y1, :] * fy[:, None]
    out = top[..., x0] * (1 - fx) + top[..., x1] * fx
    # keep exact endpoints and bounds
    out = np.clip(out, x.min(), x.max()) if x.size else out
    return out.astype(x.dtype if np.issubdtype(x.dtype, np.floating) else np.float32)


def bilinear_upsample(input: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Upsample an ``[h, w]`` map to ``target`` with corner-aligned bilinear interpolation."""
    x = np.asarray(input)
    if x.ndim != 2:
        raise ShapeError(f"bilinear_upsample: expected [h,w], got {x.shape}")
    if target[0] < x.shape[0] or target[1] < x.shape[1]:
        raise ShapeError(f"bilinear_upsample: target {target} smaller than source {x.shape}")
    return _check_finite(resize_bilinear(x, target), "bilinear_upsample")
