"""Dynamic shifted convolution kernel: forward, backward, init and cost audits.

A kernel holds two per-channel affine maps (1x1 grouped convolutions). The
first feeds a ReLU feature; a 3x3 grid of shifts at distance ``dia`` is summed
over that feature, passed through the second affine map and a sigmoid, and the
resulting gate multiplies the ReLU feature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from lienet import tensor as T
from lienet.tensor import StructuralError

VARIANTS = ("plain", "down", "up")
INIT_SCALE = 0.1
# Kaiming normal, fan_in mode, ReLU gain: a 1x1 grouped kernel has fan_in = 1
KAIMING_STD = math.sqrt(2.0)


@dataclass
class DSConvParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    dia: int
    variant: str = "plain"

    def __post_init__(self):
        if self.dia < 0:
            raise StructuralError(f"dilation rate must be >= 0, got {self.dia}")
        if self.variant not in VARIANTS:
            raise StructuralError(f"unknown variant {self.variant!r}")
        C = np.shape(self.w1)
        if not (np.shape(self.b1) == np.shape(self.w2) == np.shape(self.b2) == C) or len(C) != 1:
            raise StructuralError("w1, b1, w2, b2 must be vectors of equal length")

    @property
    def channels(self) -> int:
        return self.w1.shape[0]

    @property
    def dtype(self):
        return self.w1.dtype

    def arrays(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def num_scalars(self) -> int:
        return sum(a.size for a in self.arrays())

    def astype(self, dtype) -> "DSConvParams":
        return DSConvParams(*(a.astype(dtype) for a in self.arrays()), dia=self.dia, variant=self.variant)

    def with_variant(self, variant: str) -> "DSConvParams":
        # shares the underlying arrays (used for weight tying)
        return DSConvParams(self.w1, self.b1, self.w2, self.b2, dia=self.dia, variant=variant)


@dataclass
class DSConvGrads:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def arrays(self):
        return [self.w1, self.b1, self.w2, self.b2]

    @classmethod
    def zeros_like(cls, p: DSConvParams) -> "DSConvGrads":
        return cls(*(np.zeros_like(a) for a in p.arrays()))

    def accumulate(self, other: "DSConvGrads") -> None:
        for mine, theirs in zip(self.arrays(), other.arrays()):
            mine += theirs


@dataclass
class DSConvCache:
    x: np.ndarray  # input to the first affine map (post-resample for "up")
    pre: np.ndarray  # first affine output, before ReLU
    feat: np.ndarray  # ReLU feature, shared by the shift path and the gated path
    agg: np.ndarray
    gate: np.ndarray
    variant: str
    dia: int
    in_shape: tuple = field(default=())  # caller-visible input shape
    y_shape: tuple = field(default=())  # gated product shape, before pooling


def aggregate_shifts(x_o: np.ndarray, dia: int) -> np.ndarray:
    """Sum of the nine zero-filled shifts of ``x_o`` by ``(i*dia, j*dia)``."""
    if dia < 0:
        raise StructuralError(f"aggregate_shifts: dilation must be >= 0, got {dia}")
    if dia == 0:
        return x_o * x_o.dtype.type(9)
    H, W = x_o.shape[2:]
    # accumulate narrow floats in float64 so the result is the rounded exact sum
    padded = T.zero_pad(x_o.astype(np.promote_types(x_o.dtype, np.float64)), dia)
    # the 3x3 grid of windows is separable: sum the three row offsets, then the
    # three column offsets of that partial sum
    rows = padded[:, :, 0:H] + padded[:, :, dia : dia + H] + padded[:, :, 2 * dia : 2 * dia + H]
    out = rows[:, :, :, 0:W] + rows[:, :, :, dia : dia + W] + rows[:, :, :, 2 * dia : 2 * dia + W]
    return out.astype(x_o.dtype, copy=False)


def aggregate_shifts_windows(x_o: np.ndarray, dia: int) -> np.ndarray:
    """Same sum as ``aggregate_shifts``, built window by window."""
    H, W = x_o.shape[2:]
    padded = T.zero_pad(x_o, dia)
    out = np.zeros_like(x_o)
    for i in (-1, 0, 1):
        for j in (-1, 0, 1):
            out += T.shifted_window(padded, i, j, dia, H, W)
    return out


def aggregate_shifts_backward(dagg: np.ndarray, dia: int) -> np.ndarray:
    # the adjoint of a shift is the opposite shift; the offset set is symmetric
    return aggregate_shifts(dagg, dia)


def dsconv_forward(x: np.ndarray, p: DSConvParams, target_size: Optional[tuple] = None):
    """Run one kernel. Returns ``(y, cache)``.

    For the ``up`` variant the input is bilinearly resized to ``target_size``
    (default: twice the input size) before the first affine map. For ``down``
    the gated output is 2x2 average pooled.
    """
    T.check_rank4(x, "dsconv input")
    if x.shape[1] != p.channels:
        raise StructuralError(f"dsconv: input has {x.shape[1]} channels, kernel expects {p.channels}")
    in_shape = x.shape
    if p.variant == "up":
        if target_size is None:
            target_size = (2 * x.shape[2], 2 * x.shape[3])
        x = T.bilinear_resize(x, *target_size)
    pre = T.channel_affine(x, p.w1, p.b1)
    feat = T.relu(pre)
    agg = aggregate_shifts(feat, p.dia)
    gate = T.sigmoid(T.channel_affine(agg, p.w2, p.b2))
    y = T.mul(gate, feat)
    y_shape = y.shape
    if p.variant == "down":
        y = T.avg_pool2(y)
    cache = DSConvCache(x, pre, feat, agg, gate, p.variant, p.dia, in_shape, y_shape)
    return y, cache


def dsconv_backward(cache: DSConvCache, dy: np.ndarray, p: DSConvParams):
    """Reverse-mode gradients of one kernel. Returns ``(dx, DSConvGrads)``."""
    if cache.variant == "down":
        expected = (cache.y_shape[0], cache.y_shape[1], cache.y_shape[2] // 2, cache.y_shape[3] // 2)
    else:
        expected = cache.y_shape
    if dy.shape != tuple(expected):
        raise StructuralError(f"dsconv_backward: upstream shape {dy.shape} != output shape {expected}")
    if cache.variant == "down":
        dy = T.avg_pool2_backward(dy, cache.y_shape)

    dgate, dfeat = T.mul_backward(cache.gate, cache.feat, dy)
    dz = T.sigmoid_backward(cache.gate, dgate)
    dagg, dw2, db2 = T.channel_affine_backward(cache.agg, p.w2, dz)
    dfeat = dfeat + aggregate_shifts_backward(dagg, cache.dia)
    dpre = T.relu_backward(cache.pre, dfeat)
    dx, dw1, db1 = T.channel_affine_backward(cache.x, p.w1, dpre)

    if cache.variant == "up":
        dx = T.bilinear_resize_backward(dx, cache.in_shape)
    return dx, DSConvGrads(dw1, db1, dw2, db2)


def init_params(C: int, dia: int, variant: str = "plain", seed: int = 0, dtype=T.DEFAULT_DTYPE,
                rng: Optional[np.random.Generator] = None) -> DSConvParams:
    """Scaled Kaiming-normal weights, zero biases."""
    if C < 1:
        raise StructuralError(f"init_params: channels must be >= 1, got {C}")
    if rng is None:
        rng = np.random.default_rng(seed)
    w1 = rng.normal(0.0, KAIMING_STD, size=C) * INIT_SCALE
    w2 = rng.normal(0.0, KAIMING_STD, size=C) * INIT_SCALE
    zeros = np.zeros(C)
    return DSConvParams(w1.astype(dtype), zeros.astype(dtype), w2.astype(dtype), zeros.astype(dtype),
                        dia=dia, variant=variant)


# ---------------------------------------------------------------------------
# cost audits


def dsconv_param_count(C: int) -> int:
    # two 1x1 grouped convs, each C weights + C biases
    return 2 * (C + C)


def dilated_param_count(C: int) -> int:
    """3x3 dense dilated convolution, C in / C out, with bias."""
    return C * C * 3 * 3 + C


def dsconv_flop_count(C: int, H: int, W: int) -> dict:
    """Itemized FLOPs of one kernel application at (C, H, W).

    The first 1x1 stage is booked at 4CHW following the published breakdown;
    ``conv1_affine`` gives the nominal multiply-add count of a per-channel
    affine map for comparison and is not part of ``total``.
    """
    chw = C * H * W
    items = {
        "conv1": 4 * chw,
        "aggregation": 8 * chw,
        "conv2": 2 * chw,
        "gate_mul": chw,
    }
    items["total"] = sum(items.values())
    items["conv1_affine"] = 2 * chw
    return items


def dilated_flop_count(C: int, H: int, W: int) -> int:
    return 18 * C * C * H * W + C * H * W
