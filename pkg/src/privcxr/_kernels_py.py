"""Pure numpy implementations of the compiled kernels in ``_kernels.pyx``."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BACKEND = "numpy"


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    B, C, H, W = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    Ho, Wo = win.shape[2], win.shape[3]
    # (B, C, Ho, Wo, kh, kw) -> (B, Ho, Wo, C, kh, kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B, Ho * Wo, C * kh * kw)
    return np.ascontiguousarray(cols, dtype=np.float64)


def col2im(
    cols: np.ndarray, x_shape: tuple[int, int, int, int], kh: int, kw: int, stride: int, pad: int
) -> np.ndarray:
    B, C, H, W = x_shape
    Hp, Wp = H + 2 * pad, W + 2 * pad
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    c6 = cols.reshape(B, Ho, Wo, C, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    padded = np.zeros((B, C, Hp, Wp), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            padded[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += c6[:, :, i, j]
    if pad == 0:
        return padded
    return np.ascontiguousarray(padded[:, :, pad : pad + H, pad : pad + W])


def _mish_terms(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # tanh(softplus(x)) = n(n+2) / (n(n+2) + 2) with n = e^x, evaluated via m = e^-|x|
    m = np.exp(-np.abs(x))
    pos = x >= 0
    mm = m * (m + 2.0)
    t = np.where(pos, (1.0 + 2.0 * m) / (1.0 + 2.0 * m + 2.0 * m * m), mm / (mm + 2.0))
    sig = np.where(pos, 1.0 / (1.0 + m), m / (1.0 + m))
    return t, sig


def mish_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    t, sig = _mish_terms(x)
    return x * t, np.stack([t, sig])


def mish_backward(x: np.ndarray, aux: np.ndarray, grad: np.ndarray) -> np.ndarray:
    t = aux[0]
    return grad * (t + x * (1.0 - t * t) * aux[1])


def row_norms(g: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("ij,ij->i", g, g))


def clip_rows(g: np.ndarray, max_norm: float) -> tuple[np.ndarray, np.ndarray]:
    norms = row_norms(g)
    factor = np.ones_like(norms)
    over = norms > max_norm
    factor[over] = max_norm / norms[over]
    return g * factor[:, None], norms


def sum_rows(g: np.ndarray) -> np.ndarray:
    out = np.zeros(g.shape[1], dtype=np.float64)
    for row in g:
        out += row
    return out


def clip_sum(g: np.ndarray, max_norm: float) -> tuple[np.ndarray, np.ndarray]:
    norms = row_norms(g)
    out = np.zeros(g.shape[1], dtype=np.float64)
    for row, n in zip(g, norms):
        out += row * (max_norm / n if n > max_norm else 1.0)
    return out, norms
