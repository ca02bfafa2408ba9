"""Composite training objective and its gradient with respect to the decoder outputs."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from lienet import tensor as T
from lienet.ssim import ms_ssim


@dataclass(frozen=True)
class LossWeights:
    lambda_rec: float = 0.975
    lambda_ms_ssim: float = 0.025
    lambda_grad: float = 1.0
    omega: tuple = (1.0, 1.0, 0.04)

    def __post_init__(self):
        vals = [self.lambda_rec, self.lambda_ms_ssim, self.lambda_grad, *self.omega]
        if any(v < 0 for v in vals):
            raise ValueError(f"loss weights must be non-negative, got {vals}")


@dataclass
class LossBreakdown:
    rec: float
    ms_ssim: float
    grad: float
    total: float
    d_outputs: tuple = field(default=(), repr=False)

    def as_dict(self) -> dict:
        return {"rec": self.rec, "ms_ssim": self.ms_ssim, "grad": self.grad, "total": self.total}


def smooth_l1_elem(x: np.ndarray) -> np.ndarray:
    ax = np.abs(x)
    return np.where(ax < 1, 0.5 * x * x, ax - 0.5)


def smooth_l1_elem_grad(x: np.ndarray) -> np.ndarray:
    return np.where(np.abs(x) < 1, x, np.sign(x))


def smooth_l1(e: np.ndarray, g: np.ndarray, return_grad: bool = False):
    """Mean smooth-L1 of ``e - g``; with ``return_grad`` also d/de."""
    T.check_same_shape(e, g, "smooth_l1")
    diff = e - g
    value = float(smooth_l1_elem(diff).astype(np.float64).mean())
    if not return_grad:
        return value
    return value, (smooth_l1_elem_grad(diff) / diff.size).astype(e.dtype)


def ms_ssim_loss(e: np.ndarray, g: np.ndarray, return_grad: bool = False):
    """``1 - mean_b MS-SSIM(gray(e_b), gray(g_b))``."""
    T.check_same_shape(e, g, "ms_ssim_loss")
    ge, gg = T.to_grayscale(e), T.to_grayscale(g)
    if not return_grad:
        return float(1.0 - ms_ssim(ge, gg).mean())
    ms, dgray = ms_ssim(ge, gg, return_grad=True)
    B = e.shape[0]
    de = T.to_grayscale_backward(-dgray / dgray.dtype.type(B))
    return float(1.0 - ms.mean()), de.astype(e.dtype)


def grad_loss(outputs, g: np.ndarray, weights: LossWeights = LossWeights(), return_grad: bool = False):
    """Sobel-gradient agreement of every decoder output with the resized target.

    ``outputs[k]`` is compared against ``g`` bilinearly resized to its spatial
    size, in grayscale, in both directions, weighted by ``omega[k]``.
    """
    if len(weights.omega) < len(outputs):
        raise ValueError(f"need {len(outputs)} scale weights, got {len(weights.omega)}")
    if g.shape[1] != 3:
        raise T.StructuralError(f"grad_loss: target must have 3 channels, got {g.shape[1]}")
    total = 0.0
    grads = []
    for k, o in enumerate(outputs):
        if o.shape[:2] != g.shape[:2]:
            raise T.StructuralError(f"grad_loss: output {k + 1} shape {o.shape} incompatible with {g.shape}")
        w = weights.omega[k]
        target = T.bilinear_resize(g, *o.shape[2:]).astype(o.dtype)
        tx, ty = T.sobel_gradients(T.to_grayscale(target))
        ox, oy = T.sobel_gradients(T.to_grayscale(o))
        if not return_grad:
            total += w * (smooth_l1(ox, tx) + smooth_l1(oy, ty))
            continue
        lx, dx = smooth_l1(ox, tx, return_grad=True)
        ly, dy = smooth_l1(oy, ty, return_grad=True)
        total += w * (lx + ly)
        dgray = T.sobel_gradients_backward(dx, dy)
        grads.append((T.to_grayscale_backward(dgray) * o.dtype.type(w)).astype(o.dtype))
    if not return_grad:
        return total
    return total, tuple(grads)


def total_loss(outputs, g: np.ndarray, weights: LossWeights = LossWeights(),
               return_grad: bool = True) -> LossBreakdown:
    """Weighted sum of reconstruction, MS-SSIM and multi-scale gradient terms.

    Reconstruction and MS-SSIM use the finest output only. When
    ``return_grad`` is set, ``d_outputs`` holds d(total)/d(outputs[k]).
    """
    outputs = tuple(outputs)
    e = outputs[0]
    T.check_same_shape(e, g.astype(e.dtype), "total_loss")
    g = g.astype(e.dtype)
    if return_grad:
        rec, drec = smooth_l1(e, g, return_grad=True)
        ms, dms = ms_ssim_loss(e, g, return_grad=True)
        gl, dgl = grad_loss(outputs, g, weights, return_grad=True)
    else:
        rec = smooth_l1(e, g)
        ms = ms_ssim_loss(e, g)
        gl = grad_loss(outputs, g, weights)
    total = weights.lambda_rec * rec + weights.lambda_ms_ssim * ms + weights.lambda_grad * gl
    out = LossBreakdown(rec, ms, gl, total)
    if return_grad:
        dt = e.dtype.type
        d0 = dt(weights.lambda_rec) * drec + dt(weights.lambda_ms_ssim) * dms
        d = [dt(weights.lambda_grad) * x for x in dgl]
        d[0] = d[0] + d0
        out.d_outputs = tuple(d)
    return out


def total_loss_per_item(outputs, g: np.ndarray, weights: LossWeights = LossWeights()) -> np.ndarray:
    """Total loss of each batch item separately; their mean equals ``total_loss(...).total``.

    A batch-1 target is shared by every item.
    """
    outputs = tuple(outputs)
    e = outputs[0]
    g = g.astype(e.dtype)
    if g.shape[0] == 1:
        T.check_same_shape(e[:1], g, "total_loss_per_item")
    else:
        T.check_same_shape(e, g, "total_loss_per_item")
    axes = (1, 2, 3)
    rec = smooth_l1_elem(e - g).astype(np.float64).mean(axis=axes)
    gray_g = np.broadcast_to(T.to_grayscale(g), (e.shape[0], 1) + e.shape[2:])
    ms = 1.0 - ms_ssim(T.to_grayscale(e), gray_g)
    gl = np.zeros(e.shape[0])
    for k, o in enumerate(outputs):
        target = T.bilinear_resize(g, *o.shape[2:]).astype(o.dtype)
        tx, ty = T.sobel_gradients(T.to_grayscale(target))
        ox, oy = T.sobel_gradients(T.to_grayscale(o))
        gl += weights.omega[k] * (smooth_l1_elem(ox - tx).mean(axis=axes) + smooth_l1_elem(oy - ty).mean(axis=axes))
    return weights.lambda_rec * rec + weights.lambda_ms_ssim * ms + weights.lambda_grad * gl
