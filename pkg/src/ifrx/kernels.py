"""Convolution kernels on channel-last grids ``[B, S, T, C]``.

Every 2D convolution here is "same"-padded with an odd kernel and is expressed
as an im2col gather followed by a BLAS matmul. The gather/scatter loops are the
hot part; they run under numba when the backend allows it and fall back to
strided numpy views otherwise. Column order is ``(kh, kw, C)`` on both paths,
so weights are laid out ``[kh, kw, C, O]``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._accel import backend_name, njit


@njit(cache=True)
def _im2col_nb(x, kh, kw):
    B, S, T, C = x.shape
    ph = kh // 2
    pw = kw // 2
    ncol = C * kh * kw
    cols = np.empty((B * S * T, ncol), dtype=x.dtype)
    for b in range(B):
        for s in range(S):
            for t in range(T):
                row = (b * S + s) * T + t
                for i in range(kh):
                    si = s + i - ph
                    for j in range(kw):
                        tj = t + j - pw
                        base = (i * kw + j) * C
                        if si < 0 or si >= S or tj < 0 or tj >= T:
                            for c in range(C):
                                cols[row, base + c] = 0.0
                        else:
                            for c in range(C):
                                cols[row, base + c] = x[b, si, tj, c]
    return cols


@njit(cache=True)
def _col2im_nb(cols, B, S, T, C, kh, kw):
    ph = kh // 2
    pw = kw // 2
    out = np.zeros((B, S, T, C), dtype=cols.dtype)
    for b in range(B):
        for s in range(S):
            for t in range(T):
                row = (b * S + s) * T + t
                for i in range(kh):
                    si = s + i - ph
                    if si < 0 or si >= S:
                        continue
                    for j in range(kw):
                        tj = t + j - pw
                        if tj < 0 or tj >= T:
                            continue
                        base = (i * kw + j) * C
                        for c in range(C):
                            out[b, si, tj, c] += cols[row, base + c]
    return out


def _im2col_np(x, kh, kw):
    B, S, T, C = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # [B, S, T, C, kh, kw]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(B * S * T, kh * kw * C)


def _col2im_np(cols, B, S, T, C, kh, kw):
    ph, pw = kh // 2, kw // 2
    c6 = cols.reshape(B, S, T, kh, kw, C)
    out = np.zeros((B, S + 2 * ph, T + 2 * pw, C), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + S, j : j + T, :] += c6[:, :, :, i, j, :]
    return out[:, ph : ph + S, pw : pw + T, :]


def im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    x = np.ascontiguousarray(x)
    if backend_name() == "numba":
        return _im2col_nb(x, kh, kw)
    return _im2col_np(x, kh, kw)


def col2im(cols: np.ndarray, shape: tuple[int, int, int, int], kh: int, kw: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add columns back onto the grid."""
    B, S, T, C = shape
    cols = np.ascontiguousarray(cols)
    if backend_name() == "numba":
        return _col2im_nb(cols, B, S, T, C, kh, kw)
    return _col2im_np(cols, B, S, T, C, kh, kw)


def conv_forward(cols: np.ndarray, w: np.ndarray, b: np.ndarray | None, out_shape) -> np.ndarray:
    """``cols @ w`` reshaped to ``[B, S, T, O]``; ``w`` has shape ``[kh, kw, C, O]``."""
    O = w.shape[-1]
    z = cols @ w.reshape(-1, O)
    if b is not None:
        z += b
    return z.reshape(*out_shape[:3], O)


def conv_input_grad(g: np.ndarray, w: np.ndarray, in_channels: int) -> np.ndarray:
    """Gradient w.r.t. the conv input given the output gradient ``g`` ``[B, S, T, O]``."""
    B, S, T, O = g.shape
    kh, kw = w.shape[0], w.shape[1]
    dcols = g.reshape(-1, O) @ w.reshape(-1, O).T
    return col2im(dcols, (B, S, T, in_channels), kh, kw)


def conv_weight_grad(cols: np.ndarray, g: np.ndarray, w_shape) -> np.ndarray:
    """Batch-summed weight gradient."""
    O = g.shape[-1]
    return (cols.T @ g.reshape(-1, O)).reshape(w_shape)


def conv_weight_grad_per_sample(cols: np.ndarray, g: np.ndarray, w_shape) -> np.ndarray:
    """Per-sample weight gradients ``[B, *w_shape]``."""
    B = g.shape[0]
    O = g.shape[-1]
    c3 = cols.reshape(B, -1, cols.shape[-1])
    g3 = g.reshape(B, -1, O)
    return np.matmul(c3.transpose(0, 2, 1), g3).reshape(B, *w_shape)
