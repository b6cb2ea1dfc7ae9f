"""Dense N-mode tensor arithmetic on float64 numpy arrays.

Tensors are plain ``np.ndarray`` objects of dtype float64 in C order, so the
last mode varies fastest in memory.

Unfolding convention
--------------------
The mode-n unfolding of a tensor with modes ``0..N-1`` is the matrix whose
row index is ``i_n`` and whose columns enumerate the remaining modes in
cyclic order ``n+1, ..., N-1, 0, ..., n-1``, the last of these varying
fastest.  For a ``[2, 2, 2]`` tensor holding ``0..7``::

    unfold(t, 0) = [[0, 1, 2, 3], [4, 5, 6, 7]]
    unfold(t, 1) = [[0, 4, 1, 5], [2, 6, 3, 7]]

``fold`` is the exact inverse.  ``mode_product(t, m, n)`` is
``fold(m @ unfold(t, n), n)``; the result does not depend on the convention
as long as ``fold`` and ``unfold`` agree.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, ShapeError

EXP_BOUND = 50.0


def as_tensor(x, *, name: str = "tensor") -> np.ndarray:
    t = np.ascontiguousarray(x, dtype=np.float64)
    if not np.all(np.isfinite(t)):
        raise ContractError(f"{name} contains non-finite entries")
    return t


def zeros(shape: Sequence[int]) -> np.ndarray:
    return np.zeros(tuple(shape), dtype=np.float64)


def ones(shape: Sequence[int]) -> np.ndarray:
    return np.ones(tuple(shape), dtype=np.float64)


def _cyclic_order(ndim: int, mode: int) -> list[int]:
    return [mode] + [(mode + j) % ndim for j in range(1, ndim)]


def _check_mode(ndim: int, mode: int) -> None:
    if not 0 <= mode < ndim:
        raise ShapeError(f"mode {mode} out of range for a {ndim}-mode tensor")


def unfold(t: np.ndarray, mode: int) -> np.ndarray:
    _check_mode(t.ndim, mode)
    perm = _cyclic_order(t.ndim, mode)
    return np.ascontiguousarray(t.transpose(perm)).reshape(t.shape[mode], -1)


def fold(m: np.ndarray, mode: int, shape: Sequence[int]) -> np.ndarray:
    shape = tuple(shape)
    _check_mode(len(shape), mode)
    perm = _cyclic_order(len(shape), mode)
    permuted_shape = tuple(shape[p] for p in perm)
    if m.shape != (shape[mode], math.prod(permuted_shape[1:])):
        raise ShapeError(f"cannot fold a {m.shape} matrix into shape {shape} along mode {mode}")
    inverse = np.argsort(perm)
    return np.ascontiguousarray(m.reshape(permuted_shape).transpose(inverse))


def mode_product(t: np.ndarray, m: np.ndarray, mode: int) -> np.ndarray:
    """Multiply ``t`` by matrix ``m`` along ``mode`` (``t x_mode m``)."""
    _check_mode(t.ndim, mode)
    if m.ndim != 2 or m.shape[1] != t.shape[mode]:
        raise ShapeError(
            f"mode-{mode} product needs m.cols == t.shape[{mode}], "
            f"got m.cols={m.shape[-1]} and t.shape[{mode}]={t.shape[mode]}"
        )
    # equals fold(m @ unfold(t, mode), mode, ...) but writes the result in one pass
    before = math.prod(t.shape[:mode])
    after = math.prod(t.shape[mode + 1 :])
    out = np.matmul(m, t.reshape(before, t.shape[mode], after))
    return out.reshape(t.shape[:mode] + (m.shape[0],) + t.shape[mode + 1 :])


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"hadamard product of shapes {a.shape} and {b.shape}")
    return a * b


def elem_exp(t: np.ndarray, bound: float = EXP_BOUND) -> np.ndarray:
    if t.size and np.max(np.abs(t)) > bound:
        raise ContractError(f"elem_exp input exceeds |x| <= {bound}")
    return np.exp(t)


def frobenius_norm(t: np.ndarray) -> float:
    return float(np.sqrt(np.sum(np.square(t))))


# --- 3D convolution -------------------------------------------------------
#
# Cross-correlation without kernel flip.  Inputs are [C, D, H, W] for a single
# volume or [N, C, D, H, W] for a batch; the kernel is [C_out, C_in, k, k, k].


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _conv_geometry(x_shape, w_shape, stride, padding):
    if len(w_shape) != 5:
        raise ShapeError(f"conv3d kernel must have 5 modes, got shape {w_shape}")
    c_out, c_in, kd, kh, kw = w_shape
    if not (kd == kh == kw) or kd % 2 == 0:
        raise ShapeError(f"conv3d kernel must be cubic with odd size, got {w_shape[2:]}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride={stride} or padding={padding}")
    if x_shape[1] != c_in:
        raise ShapeError(f"conv3d input has {x_shape[1]} channels, kernel expects {c_in}")
    out = tuple(conv_output_size(s, kd, stride, padding) for s in x_shape[2:])
    if min(out) < 1:
        raise ShapeError(f"conv3d output size {out} is not positive for input {x_shape[2:]}")
    return kd, out


def _pad(x, widths):
    """Pad (or, for negative widths, crop) the spatial modes by ``[(lo, hi)] * 3``."""
    if isinstance(widths, int):
        widths = [(widths, widths)] * 3
    crop = tuple(slice(max(-lo, 0), x.shape[2 + i] - max(-hi, 0)) for i, (lo, hi) in enumerate(widths))
    x = x[(slice(None), slice(None)) + crop]
    pads = [(max(lo, 0), max(hi, 0)) for lo, hi in widths]
    if any(p != (0, 0) for p in pads):
        x = np.pad(x, [(0, 0), (0, 0)] + pads)
    return x


def _batched(x):
    if x.ndim == 4:
        return x[None], True
    if x.ndim == 5:
        return x, False
    raise ShapeError(f"conv3d input must have 4 or 5 modes, got shape {x.shape}")


def _im2col(xp, k, stride):
    """``[C * k^3, N * D' * H' * W']`` matrix of receptive fields, plus the output size."""
    cols = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))[:, :, ::stride, ::stride, ::stride]
    n, c, d, h, w = cols.shape[:5]
    mat = np.ascontiguousarray(cols.transpose(1, 5, 6, 7, 0, 2, 3, 4)).reshape(c * k**3, n * d * h * w)
    return mat, (d, h, w)


def _correlate(xp, kernel, stride):
    k = kernel.shape[2]
    mat, out = _im2col(xp, k, stride)
    y = kernel.reshape(kernel.shape[0], -1) @ mat
    return np.ascontiguousarray(y.reshape((kernel.shape[0], xp.shape[0]) + out).transpose(1, 0, 2, 3, 4))


def conv3d(x: np.ndarray, kernel: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    xb, single = _batched(x)
    _conv_geometry(xb.shape, kernel.shape, stride, padding)
    y = _correlate(_pad(xb, padding), kernel, stride)
    return y[0] if single else y


def conv3d_backward(x, kernel, grad_out, stride=1, padding=0):
    """Return ``(grad_input, grad_kernel)`` for ``conv3d(x, kernel)``.

    The input gradient is the stride-1 correlation of the zero-dilated output
    gradient with the flipped, channel-transposed kernel.
    """
    xb, single = _batched(x)
    gb = grad_out[None] if single else grad_out
    k, out = _conv_geometry(xb.shape, kernel.shape, stride, padding)
    n, c_out = gb.shape[:2]
    mat, _ = _im2col(_pad(xb, padding), k, stride)
    gw = (gb.transpose(1, 0, 2, 3, 4).reshape(c_out, -1) @ mat.T).reshape(kernel.shape)

    if stride > 1:
        dil = np.zeros((n, c_out) + tuple((o - 1) * stride + 1 for o in out))
        dil[:, :, ::stride, ::stride, ::stride] = gb
    else:
        dil = gb
    lo = k - 1 - padding
    widths = [(lo, lo + (size + 2 * padding - k) - (o - 1) * stride) for size, o in zip(xb.shape[2:], out)]
    flipped = np.ascontiguousarray(kernel[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
    gx = _correlate(_pad(dil, widths), flipped, 1)
    return (gx[0] if single else gx), gw
