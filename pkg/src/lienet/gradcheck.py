"""Finite-difference verification of every hand-written backward rule.

Each check builds a seeded float64 case, scalarizes the forward output with a
random projection, and compares the analytic gradient against central
differences (``numeric_gradient``, or a batched equivalent when the forward
accepts a batch of perturbed copies) using ``relative_error`` over the whole
gradient vector.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from lienet import tensor as T
from lienet.dsconv import DSConvParams, aggregate_shifts, aggregate_shifts_backward, dsconv_backward, dsconv_forward
from lienet.loss import LossWeights, ms_ssim_loss, smooth_l1, total_loss, total_loss_per_item
from lienet.network import NetworkConfig, build_network, net_backward, net_forward
from lienet.ssim import ms_ssim

H_STEP = 1e-6
TOLERANCE = 1e-5
F64 = np.float64


@dataclass
class CheckResult:
    component: str
    cases: int
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= TOLERANCE


def _project(rng, shape):
    return rng.normal(size=shape)


def _perturbing(arr: np.ndarray, f):
    """Wrap ``f()`` as a function of ``arr``'s contents (restored afterwards)."""

    def g(v):
        old = arr.copy()
        arr[...] = v
        try:
            return f()
        finally:
            arr[...] = old

    return g


def _params_error(arrays, analytic, f) -> float:
    num = np.concatenate([T.numeric_gradient(_perturbing(a, f), a.copy(), H_STEP).ravel() for a in arrays])
    ana = np.concatenate([np.ravel(g) for g in analytic])
    return T.relative_error(ana, num)


def _batched_numeric(x: np.ndarray, f_batch, h: float = H_STEP, chunk: int = 256) -> np.ndarray:
    """Central differences for every element of a batch-1 tensor ``x``.

    The perturbed copies are stacked along the batch axis and scored in one
    call; ``f_batch`` must return one value per batch item.
    """
    n = x.size
    flat = x.reshape(1, -1)
    out = np.empty(n)
    for start in range(0, n, chunk):
        idx = np.arange(start, min(n, start + chunk))
        m = idx.size
        xb = np.repeat(flat, 2 * m, axis=0)
        xb[np.arange(m), idx] += h
        xb[m + np.arange(m), idx] -= h
        v = np.asarray(f_batch(xb.reshape((2 * m,) + x.shape[1:])), dtype=np.float64)
        out[idx] = (v[:m] - v[m:]) / (2 * h)
    return out.reshape(x.shape)


# ---------------------------------------------------------------------------
# primitives


def _case_shape(rng, min_hw=2, max_hw=7):
    return (int(rng.integers(1, 3)), 3, int(rng.integers(min_hw, max_hw + 1)), int(rng.integers(min_hw, max_hw + 1)))


def check_primitive(name: str, seed: int) -> float:
    rng = np.random.default_rng(seed)
    shape = _case_shape(rng)
    x = rng.normal(size=shape)

    if name == "channel_affine":
        w, b = rng.normal(size=3), rng.normal(size=3)
        u = _project(rng, shape)
        dx, dw, db = T.channel_affine_backward(x, w, u)
        f = lambda: float((T.channel_affine(x, w, b) * u).sum())
        return _params_error([x, w, b], [dx, dw, db], f)
    if name == "relu":
        # keep inputs away from the kink
        x = np.where(np.abs(x) < 1e-3, 0.5, x)
        u = _project(rng, shape)
        return _params_error([x], [T.relu_backward(x, u)], lambda: float((T.relu(x) * u).sum()))
    if name == "sigmoid":
        u = _project(rng, shape)
        return _params_error([x], [T.sigmoid_backward(T.sigmoid(x), u)], lambda: float((T.sigmoid(x) * u).sum()))
    if name == "mul":
        y = rng.normal(size=shape)
        u = _project(rng, shape)
        da, db = T.mul_backward(x, y, u)
        return _params_error([x, y], [da, db], lambda: float((T.mul(x, y) * u).sum()))
    if name == "add":
        y = rng.normal(size=shape)
        u = _project(rng, shape)
        return _params_error([x, y], [u, u], lambda: float((T.add(x, y) * u).sum()))
    if name == "avg_pool2":
        u = _project(rng, T.avg_pool2(x).shape)
        return _params_error([x], [T.avg_pool2_backward(u, x.shape)], lambda: float((T.avg_pool2(x) * u).sum()))
    if name == "bilinear_resize":
        h2, w2 = int(rng.integers(1, 12)), int(rng.integers(1, 12))
        u = _project(rng, shape[:2] + (h2, w2))
        dx = T.bilinear_resize_backward(u, x.shape)
        return _params_error([x], [dx], lambda: float((T.bilinear_resize(x, h2, w2) * u).sum()))
    if name == "to_grayscale":
        u = _project(rng, (shape[0], 1) + shape[2:])
        dx = T.to_grayscale_backward(u)
        return _params_error([x], [dx], lambda: float((T.to_grayscale(x) * u).sum()))
    if name == "sobel_gradients":
        g = x[:, :1].copy()
        ux, uy = _project(rng, g.shape), _project(rng, g.shape)

        def f():
            gx, gy = T.sobel_gradients(g)
            return float((gx * ux).sum() + (gy * uy).sum())

        return _params_error([g], [T.sobel_gradients_backward(ux, uy)], f)
    if name == "aggregate_shifts":
        dia = int(rng.integers(0, 5))
        u = _project(rng, shape)
        return _params_error([x], [aggregate_shifts_backward(u, dia)],
                             lambda: float((aggregate_shifts(x, dia) * u).sum()))
    if name == "smooth_l1":
        # spread differences across both branches, away from |d| = 1
        g = rng.normal(size=shape)
        e = g + rng.choice([-1, 1], size=shape) * rng.uniform(0.05, 2.5, size=shape)
        e = np.where(np.abs(np.abs(e - g) - 1) < 1e-3, g + 0.5, e)
        _, de = smooth_l1(e, g, return_grad=True)
        return _params_error([e], [de], lambda: smooth_l1(e, g))
    if name == "ms_ssim_loss":
        # 11..21 gives one scale, 22..27 two
        s = int(rng.integers(11, 28))
        g = rng.uniform(0.1, 0.9, size=(1, 3, s, s + int(rng.integers(0, 3))))
        e = np.clip(g + 0.1 * rng.normal(size=g.shape), 0, 1)
        _, de = ms_ssim_loss(e, g, return_grad=True)
        gray_g = T.to_grayscale(g)
        per_item = lambda eb: 1.0 - ms_ssim(T.to_grayscale(eb), np.broadcast_to(gray_g, (len(eb),) + gray_g.shape[1:]))
        return T.relative_error(de, _batched_numeric(e, per_item))
    raise KeyError(name)


PRIMITIVES = (
    "channel_affine", "relu", "sigmoid", "add", "mul", "avg_pool2", "bilinear_resize",
    "to_grayscale", "sobel_gradients", "aggregate_shifts", "smooth_l1", "ms_ssim_loss",
)


# ---------------------------------------------------------------------------
# kernel, network, loss


def random_kernel(rng, dia: int, variant: str) -> DSConvParams:
    return DSConvParams(rng.normal(size=3), 0.3 * rng.normal(size=3), rng.normal(size=3), 0.3 * rng.normal(size=3),
                        dia=dia, variant=variant)


def check_dsconv(dia: int, variant: str, seed: int) -> float:
    rng = np.random.default_rng(seed)
    shape = _case_shape(rng, 2, 8)
    x = rng.normal(size=shape)
    p = random_kernel(rng, dia, variant)
    target = (int(rng.integers(2, 12)), int(rng.integers(2, 12))) if variant == "up" else None
    y, cache = dsconv_forward(x, p, target)
    u = _project(rng, y.shape)
    dx, grads = dsconv_backward(cache, u, p)
    f = lambda: float((dsconv_forward(x, p, target)[0] * u).sum())
    return _params_error([x] + p.arrays(), [dx] + grads.arrays(), f)


def _randomize(net, rng):
    for b in net.stage_params:
        for k in b.kernels:
            k.w1[:] = rng.normal(0.0, 0.8, size=3)
            k.b1[:] = rng.normal(0.0, 0.1, size=3)
            k.w2[:] = rng.normal(0.0, 0.8, size=3)
            k.b2[:] = rng.normal(0.0, 0.1, size=3)


# ReLU inputs closer than this to the kink would be crossed by a perturbation
KINK_MARGIN = 1e-4


def _relu_margin(cache) -> float:
    msrbs = cache.enc + [cache.bottleneck] + list(cache.dec.values())
    return min(float(np.abs(c.pre).min()) for m in msrbs for c in m.kernel_caches)


def check_network(tie_mode: str, skip_mode: str, seed: int, size: int = 12) -> float:
    """d(total loss)/d(every parameter and the input) of a full network.

    Weights and inputs are redrawn from the seeded generator until no ReLU
    input sits within ``KINK_MARGIN`` of zero.
    """
    rng = np.random.default_rng(seed)
    cfg = NetworkConfig(tie_mode=tie_mode, skip_mode=skip_mode)
    net = build_network(cfg, seed=seed, dtype=F64)
    weights = LossWeights()
    while True:
        _randomize(net, rng)
        x = rng.uniform(0.0, 0.3, size=(1, 3, size, size))
        g = np.clip(2.0 * x + 0.05 * rng.normal(size=x.shape), 0, 1)
        outs, cache = net_forward(x, net, return_cache=True)
        if _relu_margin(cache) >= KINK_MARGIN:
            break
    lb = total_loss(outs, g, weights)
    dx, grads = net_backward(cache, lb.d_outputs, net)
    params = net.parameters()
    f = lambda: total_loss(net_forward(x, net), g, weights, return_grad=False).total
    num_x = _batched_numeric(x, lambda xb: total_loss_per_item(net_forward(xb, net), g, weights))
    num_p = [T.numeric_gradient(_perturbing(a, f), a.copy(), H_STEP) for a in params]
    analytic = np.concatenate([np.ravel(dx)] + [a.ravel() for gb in grads for gk in gb for a in gk.arrays()])
    numeric = np.concatenate([num_x.ravel()] + [a.ravel() for a in num_p])
    return T.relative_error(analytic, numeric)


def check_total_loss(seed: int, size: int = 24) -> float:
    """d(total loss)/d(each decoder output), outputs perturbed independently."""
    rng = np.random.default_rng(seed)
    g = rng.uniform(0.0, 1.0, size=(1, 3, size, size))
    outs = []
    for k in range(3):
        s = size // 2**k
        o = T.bilinear_resize(g, s, s) + 0.2 * rng.normal(size=(1, 3, s, s))
        outs.append(np.clip(o, -0.5, 1.5))
    weights = LossWeights()
    lb = total_loss(outs, g, weights)

    def per_output(k):
        def f_batch(ob):
            n = ob.shape[0]
            tiled = [ob if j == k else np.broadcast_to(o, (n,) + o.shape[1:]) for j, o in enumerate(outs)]
            return total_loss_per_item(tiled, g, weights)
        return f_batch

    numeric = [_batched_numeric(o, per_output(k)) for k, o in enumerate(outs)]
    return T.relative_error(np.concatenate([d.ravel() for d in lb.d_outputs]),
                            np.concatenate([n.ravel() for n in numeric]))


# ---------------------------------------------------------------------------


def run_suite(cases: int = 20, seed: int = 0, network_cases: int | None = None, log=None) -> list:
    """Run every component check; returns a list of ``CheckResult``.

    ``network_cases`` is the number of seeds per tie/skip combination for
    the full-network check. The default splits ``cases`` over the four
    combinations, so the network as a whole still gets ``cases`` seeds.
    """
    combos = list(itertools.product(("mirror_tied", "untied"), ("literal", "single")))
    if network_cases is None:
        network_cases = -(-cases // len(combos))
    results = []

    def _run(component, fn, n):
        worst = max(fn(seed * 1000 + i) for i in range(n))
        r = CheckResult(component, n, worst)
        results.append(r)
        if log:
            log(r)

    for name in PRIMITIVES:
        _run(name, lambda s, name=name: check_primitive(name, s), cases)
    for variant, dia in itertools.product(("plain", "down", "up"), range(5)):
        _run(f"dsconv[{variant},dia={dia}]", lambda s, d=dia, v=variant: check_dsconv(d, v, s), cases)
    for tie, skip in combos:
        _run(f"network[{tie},{skip}]", lambda s, t=tie, k=skip: check_network(t, k, s), network_cases)
    _run("total_loss", check_total_loss, cases)
    return results
