"""Rank-4 (B, C, H, W) array primitives with hand-written backward rules.

Tensors are plain ``numpy.ndarray`` objects. Every forward primitive that the
network or the losses differentiate through has a matching ``*_backward``
function taking the upstream gradient and returning the gradient with respect
to the input(s). Primitives preserve the dtype of their input: float32 is the
production default and float64 is used for gradient verification.
"""

from __future__ import annotations

import functools
from typing import Callable

import numpy as np

DEFAULT_DTYPE = np.float32
VERIFY_DTYPE = np.float64

GRAY_WEIGHTS = (0.299, 0.587, 0.114)

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = np.array([[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]])


class StructuralError(ValueError):
    """Raised when tensor shapes or sizes violate an operation's contract."""


def as_tensor(x, dtype=None) -> np.ndarray:
    t = np.asarray(x, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
    check_rank4(t)
    return t


def check_rank4(t: np.ndarray, name: str = "tensor") -> None:
    if t.ndim != 4:
        raise StructuralError(f"{name} must be rank 4 (B, C, H, W), got shape {t.shape}")
    if min(t.shape) < 1:
        raise StructuralError(f"{name} has an empty dimension: {t.shape}")


def check_same_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise StructuralError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# padding and shifted windows


def zero_pad(t: np.ndarray, margin: int) -> np.ndarray:
    if margin < 0:
        raise StructuralError(f"zero_pad: margin must be >= 0, got {margin}")
    if margin == 0:
        return t
    m = margin
    B, C, H, W = t.shape
    out = np.zeros((B, C, H + 2 * m, W + 2 * m), dtype=t.dtype)
    out[:, :, m : m + H, m : m + W] = t
    return out


def shifted_window(padded: np.ndarray, i: int, j: int, dia: int, H: int, W: int) -> np.ndarray:
    """Crop the (H, W) window offset by (i*dia, j*dia) out of a dia-padded map."""
    if i not in (-1, 0, 1) or j not in (-1, 0, 1):
        raise StructuralError(f"shifted_window: offsets must be in {{-1,0,1}}, got ({i},{j})")
    if padded.shape[2:] != (H + 2 * dia, W + 2 * dia):
        raise StructuralError(
            f"shifted_window: padded spatial size {padded.shape[2:]} does not match "
            f"H={H}, W={W}, dia={dia}"
        )
    r0 = (i + 1) * dia
    c0 = (j + 1) * dia
    return padded[:, :, r0 : r0 + H, c0 : c0 + W]


# ---------------------------------------------------------------------------
# per-channel affine (1x1 grouped convolution with groups = C)


def _check_channel_vectors(t, w, b):
    C = t.shape[1]
    if np.shape(w) != (C,) or np.shape(b) != (C,):
        raise StructuralError(
            f"channel_affine: expected weight/bias vectors of length {C}, "
            f"got {np.shape(w)} and {np.shape(b)}"
        )


def channel_affine(t: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_channel_vectors(t, w, b)
    return t * w[None, :, None, None] + b[None, :, None, None]


def channel_affine_backward(t: np.ndarray, w: np.ndarray, dy: np.ndarray):
    """Return (dx, dw, db) for ``y = w_c * x + b_c``."""
    check_same_shape(t, dy, "channel_affine_backward")
    dx = dy * w[None, :, None, None]
    dw = (dy * t).sum(axis=(0, 2, 3))
    db = dy.sum(axis=(0, 2, 3))
    return dx, dw, db


# ---------------------------------------------------------------------------
# elementwise


def relu(t: np.ndarray) -> np.ndarray:
    return np.maximum(t, 0).astype(t.dtype, copy=False)


def relu_backward(t: np.ndarray, dy: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return np.where(t > 0, dy, 0).astype(dy.dtype, copy=False)


def sigmoid(t: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    half = t.dtype.type(0.5)
    return half + half * np.tanh(half * t)


def sigmoid_backward(s: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Backward given the sigmoid *output* ``s``."""
    return dy * s * (1 - s)


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    check_same_shape(a, b, "add")
    return a + b


def mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    check_same_shape(a, b, "mul")
    return a * b


def mul_backward(a: np.ndarray, b: np.ndarray, dy: np.ndarray):
    return dy * b, dy * a


# ---------------------------------------------------------------------------
# resampling


def avg_pool2(t: np.ndarray) -> np.ndarray:
    """2x2 mean pooling; a trailing odd row/column is dropped."""
    B, C, H, W = t.shape
    if H < 2 or W < 2:
        raise StructuralError(f"avg_pool2: needs H, W >= 2, got {H}x{W}")
    h, w = H // 2, W // 2
    blocks = t[:, :, : 2 * h, : 2 * w].reshape(B, C, h, 2, w, 2)
    return blocks.mean(axis=(3, 5), dtype=t.dtype)


def avg_pool2_backward(dy: np.ndarray, in_shape) -> np.ndarray:
    B, C, H, W = in_shape
    h, w = dy.shape[2:]
    if (h, w) != (H // 2, W // 2):
        raise StructuralError(f"avg_pool2_backward: {dy.shape} does not match input {in_shape}")
    dx = np.zeros(in_shape, dtype=dy.dtype)
    q = dy * dy.dtype.type(0.25)
    dx[:, :, : 2 * h, : 2 * w] = np.repeat(np.repeat(q, 2, axis=2), 2, axis=3)
    return dx


@functools.lru_cache(maxsize=256)
def _bilinear_matrix(size_in: int, size_out: int, dtype) -> np.ndarray:
    if size_in < 1 or size_out < 1:
        raise StructuralError(f"bilinear_matrix: sizes must be >= 1, got {size_in}->{size_out}")
    scale = size_in / size_out
    dst = np.arange(size_out, dtype=np.float64)
    src = np.clip((dst + 0.5) * scale - 0.5, 0.0, size_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, size_in - 1)
    frac = src - i0
    M = np.zeros((size_out, size_in), dtype=np.float64)
    rows = np.arange(size_out)
    np.add.at(M, (rows, i0), 1.0 - frac)
    np.add.at(M, (rows, i1), frac)
    M = M.astype(dtype)
    M.flags.writeable = False
    return M


def bilinear_matrix(size_in: int, size_out: int, dtype=np.float64) -> np.ndarray:
    """(size_out, size_in) interpolation matrix, half-pixel centers, clamped edges."""
    return _bilinear_matrix(size_in, size_out, np.dtype(dtype))


def bilinear_resize(t: np.ndarray, H2: int, W2: int) -> np.ndarray:
    H, W = t.shape[2:]
    if H2 < 1 or W2 < 1:
        raise StructuralError(f"bilinear_resize: target size must be >= 1, got {H2}x{W2}")
    if (H2, W2) == (H, W):
        return t.copy()
    Mh = bilinear_matrix(H, H2, t.dtype)
    Mw = bilinear_matrix(W, W2, t.dtype)
    return Mh @ t @ Mw.T


def bilinear_resize_backward(dy: np.ndarray, in_shape) -> np.ndarray:
    H, W = in_shape[2:]
    H2, W2 = dy.shape[2:]
    if (H2, W2) == (H, W):
        return dy.copy()
    Mh = bilinear_matrix(H, H2, dy.dtype)
    Mw = bilinear_matrix(W, W2, dy.dtype)
    return Mh.T @ dy @ Mw


# ---------------------------------------------------------------------------
# grayscale and Sobel


def to_grayscale(rgb: np.ndarray) -> np.ndarray:
    if rgb.shape[1] != 3:
        raise StructuralError(f"to_grayscale: expected 3 channels, got {rgb.shape[1]}")
    r, g, b = GRAY_WEIGHTS
    return r * rgb[:, 0:1] + g * rgb[:, 1:2] + b * rgb[:, 2:3]


def to_grayscale_backward(dgray: np.ndarray) -> np.ndarray:
    w = np.asarray(GRAY_WEIGHTS, dtype=dgray.dtype)
    return dgray * w[None, :, None, None]


def edge_pad1(t: np.ndarray) -> np.ndarray:
    """Pad one pixel on every side by replicating the border."""
    B, C, H, W = t.shape
    p = np.empty((B, C, H + 2, W + 2), dtype=t.dtype)
    p[:, :, 1:-1, 1:-1] = t
    p[:, :, 0, 1:-1] = t[:, :, 0]
    p[:, :, -1, 1:-1] = t[:, :, -1]
    p[:, :, :, 0] = p[:, :, :, 1]
    p[:, :, :, -1] = p[:, :, :, -2]
    return p


def edge_pad1_backward(dp: np.ndarray) -> np.ndarray:
    d = dp.copy()
    d[:, :, :, 1] += d[:, :, :, 0]
    d[:, :, :, -2] += d[:, :, :, -1]
    d[:, :, 1, 1:-1] += d[:, :, 0, 1:-1]
    d[:, :, -2, 1:-1] += d[:, :, -1, 1:-1]
    return d[:, :, 1:-1, 1:-1]


def _sobel_pair(p: np.ndarray, H: int, W: int):
    # separable form: a central difference along one axis, [1, 2, 1] smoothing along the other
    dx = p[:, :, :, 2:] - p[:, :, :, :-2]
    gx = dx[:, :, :-2] + 2 * dx[:, :, 1:-1] + dx[:, :, 2:]
    dy = p[:, :, 2:, :] - p[:, :, :-2, :]
    gy = dy[:, :, :, :-2] + 2 * dy[:, :, :, 1:-1] + dy[:, :, :, 2:]
    return gx, gy


def sobel_gradients(gray: np.ndarray):
    """Horizontal and vertical Sobel responses, same shape out.

    Borders are handled by replicating the edge pixel, so a constant image has
    exactly zero response everywhere.
    """
    if gray.shape[1] != 1:
        raise StructuralError(f"sobel_gradients: expected 1 channel, got {gray.shape[1]}")
    H, W = gray.shape[2:]
    return _sobel_pair(edge_pad1(gray), H, W)


def sobel_gradients_backward(dgx: np.ndarray, dgy: np.ndarray) -> np.ndarray:
    B, C, H, W = dgx.shape
    dp = np.zeros((B, C, H + 2, W + 2), dtype=dgx.dtype)
    ddx = np.zeros((B, C, H + 2, W), dtype=dgx.dtype)
    ddx[:, :, :-2] += dgx
    ddx[:, :, 1:-1] += 2 * dgx
    ddx[:, :, 2:] += dgx
    dp[:, :, :, 2:] += ddx
    dp[:, :, :, :-2] -= ddx
    ddy = np.zeros((B, C, H, W + 2), dtype=dgy.dtype)
    ddy[:, :, :, :-2] += dgy
    ddy[:, :, :, 1:-1] += 2 * dgy
    ddy[:, :, :, 2:] += dgy
    dp[:, :, 2:, :] += ddy
    dp[:, :, :-2, :] -= ddy
    return edge_pad1_backward(dp)


# ---------------------------------------------------------------------------
# finite differences


def numeric_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, one element at a time."""
    x = np.array(x, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = float(f(x))
        flat[k] = orig - h
        fm = float(f(x))
        flat[k] = orig
        gflat[k] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic, numeric) -> float:
    """Max-norm relative error ``|a - n|_inf / max(|a|_inf, |n|_inf)``.

    Pass whole gradient vectors (e.g. every parameter of a model at once):
    per-element ratios blow up on entries that are numerically zero.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - n).max() / scale)
