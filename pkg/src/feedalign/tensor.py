"""Dense tensor math used by every layer.

Tensors are plain C-contiguous numpy arrays of ``float32`` or ``float64``.
Reductions run in the compiled loop nests of :mod:`feedalign._kernels`, which
fix the summation order; ``numpy.matmul`` is never used because BLAS is free
to reorder (and fuse) the products.
"""

from __future__ import annotations

import numpy as np

from . import _kernels
from .errors import DimensionError, GeometryError, NumericError, RankError

DTYPES = {"float32": np.float32, "float64": np.float64}


def as_tensor(a, dtype=None) -> np.ndarray:
    """Return ``a`` as a dense row-major array (copying only if needed)."""
    return np.ascontiguousarray(a, dtype=dtype)


def check_finite(a: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.isfinite(a).all():
        raise NumericError(f"non-finite value in {what}")
    return a


def _result_dtype(*arrays):
    return np.result_type(*[a.dtype for a in arrays])


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``c[i, j] = sum_t a[i, t] * b[t, j]`` with ``t`` summed in ascending order."""
    if a.ndim != 2 or b.ndim != 2:
        raise RankError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    dt = _result_dtype(a, b)
    out = np.zeros((a.shape[0], b.shape[1]), dtype=dt)
    _kernels.matmul_into(as_tensor(a, dt), as_tensor(b, dt), out)
    return check_finite(out, "matmul output")


def transpose(a: np.ndarray) -> np.ndarray:
    if a.ndim != 2:
        raise RankError(f"transpose needs a rank-2 tensor, got shape {a.shape}")
    return np.ascontiguousarray(a.T)


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise DimensionError(f"hadamard shapes differ: {a.shape} vs {b.shape}")
    return check_finite(np.multiply(a, b), "hadamard output")


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _check_geometry(h, w, kh, kw, stride, pad):
    if stride < 1:
        raise GeometryError(f"stride must be >= 1, got {stride}")
    if pad < 0:
        raise GeometryError(f"padding must be >= 0, got {pad}")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise GeometryError(
            f"kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}"
        )
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise GeometryError(f"non-positive output extent {ho}x{wo}")
    return ho, wo


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return as_tensor(x)
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d_forward(x: np.ndarray, kernel: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Zero-padded 2-D cross-correlation (no kernel flip).

    ``x`` is ``N x C x H x W`` and ``kernel`` is ``O x C x kh x kw``; the
    result is ``N x O x H' x W'`` with ``H' = (H + 2 pad - kh) // stride + 1``.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise RankError(f"conv2d needs rank-4 input and kernel, got {x.shape}, {kernel.shape}")
    n, c, h, w = x.shape
    o, kc, kh, kw = kernel.shape
    if kc != c:
        raise GeometryError(f"kernel expects {kc} input channels, input has {c}")
    ho, wo = _check_geometry(h, w, kh, kw, stride, pad)
    dt = _result_dtype(x, kernel)
    out = np.zeros((n, o, ho, wo), dtype=dt)
    _kernels.conv_forward_into(_pad(as_tensor(x, dt), pad), as_tensor(kernel, dt), stride, out)
    return check_finite(out, "conv2d output")


def conv2d_backward_data(
    error_out: np.ndarray,
    kernel: np.ndarray,
    stride: int = 1,
    pad: int = 0,
    input_hw: tuple[int, int] | None = None,
) -> np.ndarray:
    """Gradient of :func:`conv2d_forward` with respect to its input.

    The error is dilated by ``stride``, zero-padded by ``k - 1`` and
    cross-correlated with the 180-degree rotated, channel-transposed kernel.
    ``input_hw`` resolves the input extent when ``stride > 1`` leaves it
    ambiguous; it defaults to the smallest consistent size.
    """
    if error_out.ndim != 4 or kernel.ndim != 4:
        raise RankError("conv2d_backward_data needs rank-4 error and kernel")
    n, o, ho, wo = error_out.shape
    ko, c, kh, kw = kernel.shape
    if ko != o:
        raise GeometryError(f"kernel has {ko} output channels, error has {o}")
    if input_hw is None:
        input_hw = ((ho - 1) * stride + kh - 2 * pad, (wo - 1) * stride + kw - 2 * pad)
    h, w = input_hw
    if _check_geometry(h, w, kh, kw, stride, pad) != (ho, wo):
        raise GeometryError(
            f"error extent {ho}x{wo} does not match input {h}x{w} "
            f"with kernel {kh}x{kw}, stride {stride}, pad {pad}"
        )
    dt = _result_dtype(error_out, kernel)
    hp, wp = h + 2 * pad, w + 2 * pad
    # dilated error placed kh-1 / kw-1 from the top-left of a full-size canvas
    canvas = np.zeros((n, o, hp + kh - 1, wp + kw - 1), dtype=dt)
    canvas[:, :, kh - 1 : kh - 1 + (ho - 1) * stride + 1 : stride,
           kw - 1 : kw - 1 + (wo - 1) * stride + 1 : stride] = error_out
    flipped = as_tensor(kernel[:, :, ::-1, ::-1].transpose(1, 0, 2, 3), dt)
    grad_padded = np.zeros((n, c, hp, wp), dtype=dt)
    _kernels.conv_forward_into(canvas, flipped, 1, grad_padded)
    out = as_tensor(grad_padded[:, :, pad : pad + h, pad : pad + w])
    return check_finite(out, "conv2d input gradient")


def conv2d_backward_kernel(
    x: np.ndarray,
    error_out: np.ndarray,
    stride: int = 1,
    pad: int = 0,
    kernel_hw: tuple[int, int] | None = None,
) -> np.ndarray:
    """Gradient of the summed loss with respect to the kernel.

    ``kernel_hw`` defaults to the largest kernel consistent with the shapes.
    """
    if x.ndim != 4 or error_out.ndim != 4:
        raise RankError("conv2d_backward_kernel needs rank-4 input and error")
    n, c, h, w = x.shape
    en, o, ho, wo = error_out.shape
    if en != n:
        raise GeometryError(f"batch mismatch: input {n}, error {en}")
    if kernel_hw is None:
        kernel_hw = (h + 2 * pad - (ho - 1) * stride, w + 2 * pad - (wo - 1) * stride)
    kh, kw = kernel_hw
    if _check_geometry(h, w, kh, kw, stride, pad) != (ho, wo):
        raise GeometryError(
            f"error extent {ho}x{wo} inconsistent with input {h}x{w}, "
            f"kernel {kh}x{kw}, stride {stride}, pad {pad}"
        )
    dt = _result_dtype(x, error_out)
    out = np.zeros((o, c, kh, kw), dtype=dt)
    _kernels.conv_kernel_grad_into(_pad(as_tensor(x, dt), pad), as_tensor(error_out, dt), stride, out)
    return check_finite(out, "conv2d kernel gradient")


def maxpool2d_forward(x: np.ndarray, k: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Max pooling without padding; returns ``(out, argmax)`` with flat H*W indices."""
    if x.ndim != 4:
        raise RankError(f"maxpool needs a rank-4 input, got {x.shape}")
    n, c, h, w = x.shape
    ho, wo = _check_geometry(h, w, k, k, stride, 0)
    out = np.empty((n, c, ho, wo), dtype=x.dtype)
    arg = np.empty((n, c, ho, wo), dtype=np.int64)
    _kernels.maxpool_forward_into(as_tensor(x), k, k, stride, out, arg)
    return out, arg


def maxpool2d_backward(error_out: np.ndarray, argmax: np.ndarray, input_shape) -> np.ndarray:
    if error_out.shape != argmax.shape:
        raise GeometryError(f"error {error_out.shape} does not match pooling map {argmax.shape}")
    out = np.zeros(input_shape, dtype=error_out.dtype)
    _kernels.maxpool_backward_into(as_tensor(error_out), argmax, out)
    return out
