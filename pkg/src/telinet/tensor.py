"""Dense float32 tensors and the raw kernels the layers are built from.

Tensors are plain ``numpy.ndarray`` objects of dtype float32 in NCHW layout.
Every kernel here is a pure function: it never mutates its inputs and the
same inputs give bitwise-identical outputs. Kernels also accept float64
arrays and preserve the dtype, which the gradient checks rely on.

Convolutions are 3x3 cross-correlations with zero "same" padding and unit
stride. Pooling is 2x2 with stride 2 and drops an odd trailing row/column.
"""

from __future__ import annotations

import contextlib
from typing import Iterator, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

DTYPE = np.float32
KERNEL_SIZE = 3

# Approximate im2col band size (elements). Convolutions unfold a few output
# rows at a time so the columns stay in cache; ~512 KiB bands measured 2-3x
# faster than unfolding whole images.
_BAND_BUDGET = 1 << 17

_strict = False


class ShapeError(ValueError):
    """Raised when tensor shapes are inconsistent for an operation."""


class NumericalError(ArithmeticError):
    """Raised when a kernel produces NaN or Inf."""


def tensor(data, shape: Sequence[int] | None = None) -> np.ndarray:
    """Build a float32 tensor from nested sequences or a flat buffer."""
    arr = np.array(data, dtype=DTYPE)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s < 1 for s in shape):
            raise ShapeError(f"dimensions must be positive, got {shape}")
        if arr.size != int(np.prod(shape)):
            raise ShapeError(f"{arr.size} elements cannot fill shape {shape}")
        arr = arr.reshape(shape)
    return arr


def check_finite(x: np.ndarray, where: str) -> np.ndarray:
    # min/max propagate NaN and expose Inf without allocating a mask.
    if x.size and not (np.isfinite(x.min()) and np.isfinite(x.max())):
        raise NumericalError(f"non-finite values produced by {where}")
    return x


@contextlib.contextmanager
def strict_deterministic() -> Iterator[None]:
    """Pin BLAS to one thread so every reduction has a fixed order."""
    global _strict
    previous = _strict
    _strict = True
    try:
        with threadpool_limits(limits=1):
            yield
    finally:
        _strict = previous


def is_strict() -> bool:
    return _strict


def _float_dtype(*arrays: np.ndarray) -> np.dtype:
    return np.result_type(DTYPE, *arrays)


def _band_rows(channels: int, width: int) -> int:
    return max(1, _BAND_BUDGET // (channels * KERNEL_SIZE * KERNEL_SIZE * width))


def _im2col(xp: np.ndarray, top: int, rows: int, out: np.ndarray) -> np.ndarray:
    """Unfold output rows ``top:top+rows`` of one padded (C, H+2, W+2) image.

    Fills ``out`` (a (C, 3, 3, >=rows, W) buffer) and returns a (C*9, rows*W)
    view. Column rows are ordered (channel, ky, kx) to match a row-major
    (F, C, 3, 3) weight tensor flattened to (F, C*9).
    """
    channels, width = xp.shape[0], xp.shape[2] - 2
    cols = out[:, :, :, :rows]
    for ky in range(KERNEL_SIZE):
        for kx in range(KERNEL_SIZE):
            cols[:, ky, kx] = xp[:, top + ky:top + ky + rows, kx:kx + width]
    return cols.reshape(channels * KERNEL_SIZE * KERNEL_SIZE, rows * width)


def _pad(x: np.ndarray, dtype: np.dtype) -> np.ndarray:
    return np.pad(x.astype(dtype, copy=False), ((0, 0), (0, 0), (1, 1), (1, 1)))


def _check_conv_shapes(x: np.ndarray, weights: np.ndarray) -> None:
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-D [N,C,H,W], got shape {x.shape}")
    if weights.ndim != 4 or weights.shape[2:] != (KERNEL_SIZE, KERNEL_SIZE):
        raise ShapeError(f"conv2d weights must be [F,C,3,3], got shape {weights.shape}")
    if weights.shape[1] != x.shape[1]:
        raise ShapeError(
            f"conv2d channel mismatch: input shape {x.shape} vs weights shape {weights.shape}"
        )
    if min(x.shape) < 1:
        raise ShapeError(f"conv2d input has an empty dimension: {x.shape}")


def conv2d_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """3x3 same-padded, stride-1 cross-correlation.

    Args:
        x: Input of shape (N, C, H, W).
        weights: Filters of shape (F, C, 3, 3).
        bias: Per-filter bias of shape (F,).

    Returns:
        Output of shape (N, F, H, W).
    """
    _check_conv_shapes(x, weights)
    filters = weights.shape[0]
    if bias.shape != (filters,):
        raise ShapeError(f"conv2d bias shape {bias.shape} does not match weights shape {weights.shape}")
    n, channels, height, width = x.shape
    dtype = _float_dtype(x, weights, bias)
    wmat = weights.reshape(filters, -1).astype(dtype, copy=False)
    b = bias.astype(dtype, copy=False)[:, None]
    out = np.empty((n, filters, height, width), dtype=dtype)
    xp = _pad(x, dtype)
    band = _band_rows(channels, width)
    buf = np.empty((channels, KERNEL_SIZE, KERNEL_SIZE, band, width), dtype=dtype)
    for i in range(n):
        for top in range(0, height, band):
            rows = min(band, height - top)
            cols = _im2col(xp[i], top, rows, buf)
            np.matmul(wmat, cols, out=out[i, :, top:top + rows].reshape(filters, rows * width))
    out += b[:, :, None]
    return check_finite(out, "conv2d_forward")


def conv2d_backward(
    x: np.ndarray,
    weights: np.ndarray,
    grad_out: np.ndarray,
    need_input_grad: bool = True,
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Gradients of :func:`conv2d_forward`.

    Returns ``(grad_input, grad_weights, grad_bias)``. ``grad_input`` is None
    when ``need_input_grad`` is False (the first layer of a network).
    """
    _check_conv_shapes(x, weights)
    n, channels, height, width = x.shape
    filters = weights.shape[0]
    if grad_out.shape != (n, filters, height, width):
        raise ShapeError(
            f"conv2d grad_out shape {grad_out.shape} does not match expected {(n, filters, height, width)}"
        )
    dtype = _float_dtype(x, weights, grad_out)
    wmat = weights.reshape(filters, -1).astype(dtype, copy=False)
    wmat_t = np.ascontiguousarray(wmat.T)
    g = grad_out.astype(dtype, copy=False)

    grad_bias = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(dtype)
    grad_w = np.zeros((filters, channels * 9), dtype=np.float64)
    xp = _pad(x, dtype)
    dxp = np.zeros_like(xp) if need_input_grad else None

    band = _band_rows(channels, width)
    buf = np.empty((channels, KERNEL_SIZE, KERNEL_SIZE, band, width), dtype=dtype)
    for i in range(n):
        for top in range(0, height, band):
            rows = min(band, height - top)
            cols = _im2col(xp[i], top, rows, buf)
            g_band = g[i, :, top:top + rows].reshape(filters, rows * width)
            grad_w += g_band @ cols.T
            if dxp is None:
                continue
            dcols = (wmat_t @ g_band).reshape(channels, KERNEL_SIZE, KERNEL_SIZE, rows, width)
            for ky in range(KERNEL_SIZE):
                for kx in range(KERNEL_SIZE):
                    dxp[i, :, top + ky:top + ky + rows, kx:kx + width] += dcols[:, ky, kx]
    grad_x = None if dxp is None else np.ascontiguousarray(dxp[:, :, 1:-1, 1:-1])

    grad_w = grad_w.astype(dtype).reshape(weights.shape)
    check_finite(grad_w, "conv2d_backward")
    if grad_x is not None:
        check_finite(grad_x, "conv2d_backward")
    return grad_x, grad_w, grad_bias


def _pool_views(x: np.ndarray) -> list[np.ndarray]:
    """The four members of every 2x2 window, in row-major window order."""
    ho, wo = x.shape[2] // 2, x.shape[3] // 2
    return [x[:, :, dy:2 * ho:2, dx:2 * wo:2] for dy in (0, 1) for dx in (0, 1)]


def maxpool2d_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2 max pooling with stride 2.

    Returns the pooled tensor and a uint8 map holding, for every output
    element, the flat index (``2 * dy + dx``) of the winner inside its 2x2
    window. Ties go to the lowest index.
    """
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d input must be 4-D [N,C,H,W], got shape {x.shape}")
    if x.shape[2] < 2 or x.shape[3] < 2:
        raise ShapeError(f"maxpool2d needs H and W >= 2, got shape {x.shape}")
    ho, wo = x.shape[2] // 2, x.shape[3] // 2
    x = x[:, :, :2 * ho, :2 * wo]
    # Reduce each row pair horizontally, then vertically. Strict '>' keeps
    # the earlier member on ties, which yields the lowest window index.
    left, right = x[..., 0::2], x[..., 1::2]
    right_wins = right > left
    rows = np.maximum(left, right)
    top, bottom = rows[:, :, 0::2], rows[:, :, 1::2]
    bottom_wins = bottom > top
    out = np.maximum(top, bottom)
    check_finite(out, "maxpool2d_forward")
    argmax = np.where(bottom_wins, right_wins[:, :, 1::2], right_wins[:, :, 0::2]).view(np.uint8)
    argmax += 2 * bottom_wins.view(np.uint8)
    return out, argmax


def maxpool2d_backward(
    argmax: np.ndarray, grad_out: np.ndarray, input_shape: Sequence[int]
) -> np.ndarray:
    """Route ``grad_out`` to the window positions recorded by :func:`maxpool2d_forward`."""
    input_shape = tuple(input_shape)
    if len(input_shape) != 4:
        raise ShapeError(f"maxpool2d input shape must be 4-D, got {input_shape}")
    n, channels, height, width = input_shape
    expected = (n, channels, height // 2, width // 2)
    if grad_out.shape != expected or argmax.shape != expected:
        raise ShapeError(
            f"maxpool2d backward: grad_out {grad_out.shape} / argmax {argmax.shape} "
            f"do not match pooled shape {expected}"
        )
    dtype = _float_dtype(grad_out)
    # Odd trailing rows/columns are outside every window and stay zero.
    grad = np.empty(input_shape, dtype) if height % 2 == 0 and width % 2 == 0 else np.zeros(input_shape, dtype)
    for k, view in enumerate(_pool_views(grad)):
        np.multiply(grad_out, argmax == k, out=view)
    return grad


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of a (M, K) and a (K, N) tensor."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    dtype = _float_dtype(a, b)
    out = a.astype(dtype, copy=False) @ b.astype(dtype, copy=False)
    return check_finite(out, "matmul")


def flatten(x: np.ndarray) -> np.ndarray:
    """Collapse all but the leading (batch) dimension, row-major."""
    if x.ndim < 1:
        raise ShapeError("cannot flatten a scalar")
    return x.reshape(x.shape[0], -1)


def reshape(x: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} ({x.size} elements) to {shape}")
    return x.reshape(shape)
