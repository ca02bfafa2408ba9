"""Gaussian-window SSIM / MS-SSIM with analytic gradients.

Local statistics use an 11-tap separable Gaussian (sigma 1.5) applied in
"valid" mode, so a map is ``(H - 10) x (W - 10)``. Inputs are (B, 1, H, W)
grayscale tensors in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from lienet import tensor as T
from lienet.tensor import StructuralError

WIN_SIZE = 11
WIN_SIGMA = 1.5
K1 = 0.01
K2 = 0.03
DATA_RANGE = 1.0
MS_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
# scale factors below this are clamped before the fractional power
CS_FLOOR = 1e-6


def gaussian_window(size: int = WIN_SIZE, sigma: float = WIN_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


@lru_cache(maxsize=64)
def _valid_matrix(n: int, k: int, sigma: float) -> np.ndarray:
    # banded (n - k + 1) x n matrix: row i holds the window at offset i
    g = gaussian_window(k, sigma)
    m = np.zeros((n - k + 1, n))
    for i in range(n - k + 1):
        m[i, i : i + k] = g
    m.setflags(write=False)
    return m


def _check_fits(H: int, W: int, k: int) -> None:
    if H < k or W < k:
        raise StructuralError(f"image {H}x{W} is smaller than the {k}x{k} window")


def filter_valid(t: np.ndarray, k: int = WIN_SIZE, sigma: float = WIN_SIGMA) -> np.ndarray:
    """Separable Gaussian filter, valid region only."""
    H, W = t.shape[2:]
    _check_fits(H, W, k)
    mh = _valid_matrix(H, k, sigma).astype(t.dtype, copy=False)
    mw = _valid_matrix(W, k, sigma).astype(t.dtype, copy=False)
    return mh @ t @ mw.T


def filter_valid_backward(d: np.ndarray, in_shape, k: int = WIN_SIZE, sigma: float = WIN_SIGMA) -> np.ndarray:
    H, W = in_shape[2:]
    mh = _valid_matrix(H, k, sigma).astype(d.dtype, copy=False)
    mw = _valid_matrix(W, k, sigma).astype(d.dtype, copy=False)
    return mh.T @ d @ mw


@dataclass
class _SsimCache:
    x: np.ndarray
    y: np.ndarray
    mu_x: np.ndarray
    mu_y: np.ndarray
    a1: np.ndarray
    b1: np.ndarray
    a2: np.ndarray
    b2: np.ndarray


def ssim_maps(x: np.ndarray, y: np.ndarray):
    """Return ``(luminance_map, contrast_structure_map, cache)``."""
    T.check_same_shape(x, y, "ssim")
    c1 = (K1 * DATA_RANGE) ** 2
    c2 = (K2 * DATA_RANGE) ** 2
    # one filtering pass over the five stacked moment maps
    C = x.shape[1]
    f = filter_valid(np.concatenate([x, y, x * x, y * y, x * y], axis=1))
    mu_x, mu_y, exx, eyy, exy = (f[:, i * C : (i + 1) * C] for i in range(5))
    sxx = exx - mu_x * mu_x
    syy = eyy - mu_y * mu_y
    sxy = exy - mu_x * mu_y
    a1 = 2 * mu_x * mu_y + c1
    b1 = mu_x * mu_x + mu_y * mu_y + c1
    a2 = 2 * sxy + c2
    b2 = sxx + syy + c2
    return a1 / b1, a2 / b2, _SsimCache(x, y, mu_x, mu_y, a1, b1, a2, b2)


def ssim_maps_backward(cache: _SsimCache, dl: np.ndarray, dcs: np.ndarray):
    """Gradient w.r.t. the first image ``x`` given map-level upstream grads."""
    c = cache
    dl_dmux = (2 * c.mu_y * c.b1 - c.a1 * 2 * c.mu_x) / (c.b1 * c.b1)
    dcs_dsxx = -c.a2 / (c.b2 * c.b2)
    dcs_dsxy = 2 / c.b2
    g_mu = dl * dl_dmux + dcs * (dcs_dsxx * (-2 * c.mu_x) + dcs_dsxy * (-c.mu_y))
    g_exx = dcs * dcs_dsxx
    g_exy = dcs * dcs_dsxy
    C = c.x.shape[1]
    shape = c.x.shape[:1] + (3 * C,) + c.x.shape[2:]
    d = filter_valid_backward(np.concatenate([g_mu, g_exx, g_exy], axis=1), shape)
    return d[:, :C] + 2 * c.x * d[:, C : 2 * C] + c.y * d[:, 2 * C :]


def ssim_per_image(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Mean SSIM per batch item."""
    l, cs, _ = ssim_maps(x, y)
    return (l * cs).mean(axis=(1, 2, 3))


def num_scales(H: int, W: int, max_scales: int = len(MS_WEIGHTS)) -> int:
    """Largest scale count whose coarsest level still fits one window."""
    n = 0
    h, w = H, W
    while n < max_scales and h >= WIN_SIZE and w >= WIN_SIZE:
        n += 1
        h, w = h // 2, w // 2
    return n


def scale_weights(n: int) -> np.ndarray:
    """The standard weights at full depth (they sum to 1.0001); renormalized when truncated."""
    w = np.asarray(MS_WEIGHTS[:n], dtype=np.float64)
    return w if n == len(MS_WEIGHTS) else w / w.sum()


def ms_ssim(x: np.ndarray, y: np.ndarray, return_grad: bool = False):
    """Per-image MS-SSIM of grayscale batches; optionally d(sum MS)/dx too.

    Scales are produced by 2x2 average pooling. When the image is too small
    for five scales the count shrinks and the weights are renormalized.
    """
    T.check_same_shape(x, y, "ms_ssim")
    n = num_scales(*x.shape[2:])
    if n == 0:
        raise StructuralError(f"ms_ssim: image {x.shape[2]}x{x.shape[3]} is smaller than one window")
    weights = scale_weights(n)
    caches, factors, raw, shapes = [], [], [], []
    for s in range(n):
        if s > 0:
            x = T.avg_pool2(x)
            y = T.avg_pool2(y)
        shapes.append(x.shape)
        l, cs, c = ssim_maps(x, y)
        caches.append((c, l, cs))
        v = (l * cs if s == n - 1 else cs).mean(axis=(1, 2, 3)).astype(np.float64)
        raw.append(v)
        factors.append(np.maximum(v, CS_FLOOR))
    factors = np.stack(factors)  # (n, B)
    ms = np.prod(factors ** weights[:, None], axis=0)
    if not return_grad:
        return ms

    dx = None
    for s in range(n - 1, -1, -1):
        c, l, cs = caches[s]
        # d ms / d factor_s, zero where the factor was clamped
        dfac = np.where(np.stack(raw)[s] > CS_FLOOR, ms * weights[s] / factors[s], 0.0)
        npix = np.prod(l.shape[1:])
        g = (dfac / npix).astype(l.dtype)[:, None, None, None]
        if s == n - 1:
            d = ssim_maps_backward(c, g * cs, g * l)
        else:
            d = ssim_maps_backward(c, np.zeros_like(l), np.broadcast_to(g, cs.shape))
        if dx is not None:
            d = d + dx
        dx = d if s == 0 else T.avg_pool2_backward(d, shapes[s - 1])
    return ms, dx
