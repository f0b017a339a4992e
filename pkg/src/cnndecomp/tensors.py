"""Dense tensor kernels: convolution, pooling, dense, and activations.

All inputs are HWC-ordered numpy arrays.  Weights are stored as float32,
every computation upcasts to float64 before accumulating, and results stay
float64 so downstream comparisons against reference oracles are tight.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError


class Padding(Enum):
    WITH = "with"   # pad with zeros so out = ceil(in / stride)
    ZERO = "zero"   # no padding; out = floor((in - k) / stride) + 1


class PoolMode(Enum):
    MAX = "max"
    AVG = "avg"


@dataclass(frozen=True)
class ConvParams:
    kernel: np.ndarray  # [kh, kw, c_in, c_out], float32
    bias: np.ndarray    # [c_out], float32
    stride: int = 1
    padding: Padding = Padding.WITH

    def __post_init__(self):
        if self.kernel.ndim != 4:
            raise ShapeError(f"conv kernel must be rank 4, got {self.kernel.shape}")
        if self.bias.shape != (self.kernel.shape[3],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match c_out={self.kernel.shape[3]}"
            )
        if self.stride < 1:
            raise ShapeError(f"stride must be positive, got {self.stride}")


def _axis_geometry(size: int, k: int, stride: int, padding: Padding) -> tuple[int, int, int]:
    """Return (out_size, pad_before, pad_after) along one spatial axis."""
    if padding is Padding.WITH:
        out = -(-size // stride)  # ceil
        total = max((out - 1) * stride + k - size, 0)
        before = total // 2
        return out, before, total - before
    out = (size - k) // stride + 1
    if out < 1:
        raise ShapeError(f"kernel size {k} larger than input size {size} with zero padding")
    return out, 0, 0


def conv_out_shape(in_shape: tuple[int, int, int], params: ConvParams) -> tuple[int, int, int]:
    h, w, c = in_shape
    kh, kw, c_in, c_out = params.kernel.shape
    if c != c_in:
        raise ShapeError(f"input has {c} channels, kernel expects {c_in}")
    oh, _, _ = _axis_geometry(h, kh, params.stride, params.padding)
    ow, _, _ = _axis_geometry(w, kw, params.stride, params.padding)
    return oh, ow, c_out


def pad_input(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """Zero-pad an [H, W, C] input per the padding mode; result is float64."""
    if x.ndim != 3:
        raise ShapeError(f"conv input must be rank 3, got shape {x.shape}")
    h, w, _ = x.shape
    kh, kw = params.kernel.shape[:2]
    _, top, bottom = _axis_geometry(h, kh, params.stride, params.padding)
    _, left, right = _axis_geometry(w, kw, params.stride, params.padding)
    x64 = np.asarray(x, dtype=np.float64)
    if top or bottom or left or right:
        x64 = np.pad(x64, ((top, bottom), (left, right), (0, 0)))
    if x64.shape[0] < kh or x64.shape[1] < kw:
        raise ShapeError(
            f"kernel {kh}x{kw} larger than padded input {x64.shape[0]}x{x64.shape[1]}"
        )
    return x64


def sliding_windows(x: np.ndarray, params: ConvParams) -> Iterator[tuple[np.ndarray, int, int]]:
    """Yield (window[kh, kw, C], out_row, out_col) in row-major output order."""
    oh, ow, _ = conv_out_shape(x.shape, params)
    xp = pad_input(x, params)
    kh, kw = params.kernel.shape[:2]
    s = params.stride
    for r in range(oh):
        for c in range(ow):
            yield xp[r * s:r * s + kh, c * s:c * s + kw, :], r, c


def conv2d(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """2-D cross-correlation: out[r, c, k] = dot(window(r, c), kernel[..., k]) + bias[k]."""
    oh, ow, c_out = conv_out_shape(x.shape, params)
    xp = pad_input(x, params)
    kh, kw = params.kernel.shape[:2]
    s = params.stride
    # windows: [oh', ow', C, kh, kw] -> strided to the requested stride
    win = sliding_window_view(xp, (kh, kw), axis=(0, 1))[::s, ::s]
    k64 = np.asarray(params.kernel, dtype=np.float64)
    out = np.einsum("rcdij,ijdk->rck", win, k64, optimize=True)
    out += np.asarray(params.bias, dtype=np.float64)
    assert out.shape == (oh, ow, c_out)
    return out


def pool2d(x: np.ndarray, pool_size: int, mode: PoolMode) -> np.ndarray:
    if x.ndim != 3:
        raise ShapeError(f"pool input must be rank 3, got shape {x.shape}")
    h, w, c = x.shape
    if h % pool_size or w % pool_size:
        raise ShapeError(f"spatial dims {h}x{w} not divisible by pool size {pool_size}")
    blocks = np.asarray(x, dtype=np.float64).reshape(
        h // pool_size, pool_size, w // pool_size, pool_size, c
    )
    if mode is PoolMode.MAX:
        return blocks.max(axis=(1, 3))
    return blocks.mean(axis=(1, 3))


def dense(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """x @ W + b, computed column by column.

    Per-column dots keep every output independent of the matrix width, so a
    column copied verbatim into another matrix produces a bit-identical value.
    """
    x64 = np.ascontiguousarray(x, dtype=np.float64).ravel()
    n_in, n_out = weights.shape
    if x64.shape[0] != n_in:
        raise ShapeError(f"dense input size {x64.shape[0]} != weight rows {n_in}")
    if bias.shape != (n_out,):
        raise ShapeError(f"dense bias shape {bias.shape} != ({n_out},)")
    out = np.empty(n_out, dtype=np.float64)
    for j in range(n_out):
        col = np.ascontiguousarray(weights[:, j], dtype=np.float64)
        out[j] = np.dot(x64, col) + float(bias[j])
    return out


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def softmax(x: np.ndarray) -> np.ndarray:
    x64 = np.asarray(x, dtype=np.float64).ravel()
    e = np.exp(x64 - x64.max())
    return e / e.sum()


def flatten(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float64).reshape(-1).copy()


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"add operands differ in shape: {a.shape} vs {b.shape}")
    return np.asarray(a, dtype=np.float64) + np.asarray(b, dtype=np.float64)
