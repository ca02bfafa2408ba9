"""Multi-scale shifted residual blocks and the encoder/bottleneck/decoder network.

Blocks are addressed by *site*: ``("enc", l)`` for encoder stage l,
``("bottleneck", L + 1)`` and ``("dec", l)`` for decoder stage l. In the
default ``mirror_tied`` mode encoder and decoder stage l share one parameter
set and the bottleneck shares the deepest one, so a 3-stage network owns
exactly three blocks. ``untied`` gives every site its own block.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from lienet import tensor as T
from lienet.dsconv import (
    DSConvGrads,
    DSConvParams,
    dsconv_backward,
    dsconv_flop_count,
    dsconv_forward,
    init_params,
)
from lienet.tensor import StructuralError

TIE_MODES = ("mirror_tied", "untied")
SKIP_MODES = ("literal", "single")
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def parse_dia_set(text) -> tuple:
    """Accept ``"0+1+2+3+4"``, ``"2,3,4"``, a single int or a sequence."""
    if isinstance(text, int):
        return (text,)
    if isinstance(text, str):
        parts = [s for s in text.replace(",", "+").split("+") if s.strip()]
        try:
            return tuple(int(s) for s in parts)
        except ValueError:
            raise StructuralError(f"cannot parse dilation set {text!r}") from None
    return tuple(int(d) for d in text)


@dataclass(frozen=True)
class NetworkConfig:
    dia_set: tuple = (0, 1, 2, 3, 4)
    stages: int = 3
    channels: int = 3
    tie_mode: str = "mirror_tied"
    skip_mode: str = "literal"

    def __post_init__(self):
        object.__setattr__(self, "dia_set", parse_dia_set(self.dia_set))
        d = self.dia_set
        if not d:
            raise StructuralError("dia_set must not be empty")
        if any(r < 0 for r in d) or any(b <= a for a, b in zip(d, d[1:])):
            raise StructuralError(f"dia_set must be strictly increasing and >= 0, got {d}")
        if self.stages < 1:
            raise StructuralError(f"stages must be >= 1, got {self.stages}")
        if self.channels != 3:
            raise StructuralError(f"channels must be 3, got {self.channels}")
        if self.tie_mode not in TIE_MODES:
            raise StructuralError(f"tie_mode must be one of {TIE_MODES}, got {self.tie_mode!r}")
        if self.skip_mode not in SKIP_MODES:
            raise StructuralError(f"skip_mode must be one of {SKIP_MODES}, got {self.skip_mode!r}")

    @property
    def kappa(self) -> int:
        return len(self.dia_set)

    @property
    def num_blocks(self) -> int:
        return self.stages if self.tie_mode == "mirror_tied" else 2 * self.stages + 1

    def sites(self) -> list:
        L = self.stages
        return (
            [("enc", l) for l in range(1, L + 1)]
            + [("bottleneck", L + 1)]
            + [("dec", l) for l in range(L, 0, -1)]
        )

    def block_index(self, site) -> int:
        kind, l = site
        if self.tie_mode == "mirror_tied":
            return self.stages - 1 if kind == "bottleneck" else l - 1
        return self.sites().index(site)


@dataclass
class MsrbParams:
    kernels: list
    variant: str = "plain"

    def __post_init__(self):
        dias = [k.dia for k in self.kernels]
        if not dias:
            raise StructuralError("an MSRB needs at least one kernel")
        if any(b <= a for a, b in zip(dias, dias[1:])):
            raise StructuralError(f"kernel dilation rates must be strictly increasing, got {dias}")

    @property
    def dia_set(self) -> tuple:
        return tuple(k.dia for k in self.kernels)

    def num_scalars(self) -> int:
        return sum(k.num_scalars() for k in self.kernels)

    def with_variant(self, variant: str) -> "MsrbParams":
        return MsrbParams([k.with_variant(variant) for k in self.kernels], variant)


@dataclass
class Network:
    config: NetworkConfig
    stage_params: list  # list[MsrbParams], one per unique parameter set

    def __post_init__(self):
        if len(self.stage_params) != self.config.num_blocks:
            raise StructuralError(
                f"{self.config.tie_mode} network needs {self.config.num_blocks} blocks, "
                f"got {len(self.stage_params)}"
            )
        for b in self.stage_params:
            if b.dia_set != self.config.dia_set:
                raise StructuralError(f"block dilation set {b.dia_set} != config {self.config.dia_set}")

    @property
    def dtype(self):
        return self.stage_params[0].kernels[0].dtype

    def block(self, site, variant: str) -> MsrbParams:
        return self.stage_params[self.config.block_index(site)].with_variant(variant)

    def astype(self, dtype) -> "Network":
        blocks = [MsrbParams([k.astype(dtype) for k in b.kernels], b.variant) for b in self.stage_params]
        return Network(self.config, blocks)

    def parameters(self) -> list:
        """Flat list of every parameter array, in checkpoint order."""
        return [a for b in self.stage_params for k in b.kernels for a in k.arrays()]


def build_network(config: Optional[NetworkConfig] = None, seed: int = 0, dtype=T.DEFAULT_DTYPE) -> Network:
    config = config or NetworkConfig()
    rng = np.random.default_rng(seed)
    blocks = [
        MsrbParams([init_params(config.channels, d, rng=rng, dtype=dtype) for d in config.dia_set])
        for _ in range(config.num_blocks)
    ]
    return Network(config, blocks)


# ---------------------------------------------------------------------------
# MSRB


@dataclass
class MsrbCache:
    kernel_caches: list
    variant: str
    kappa: int
    skip_shape: Optional[tuple] = None


def msrb_forward(x: np.ndarray, p: MsrbParams, skip: Optional[np.ndarray] = None,
                 skip_mode: str = "literal", return_cache: bool = False):
    if p.variant == "up":
        if skip is None:
            raise StructuralError("msrb_forward: the up variant requires a skip tensor")
        target = skip.shape[2:]
    elif skip is not None:
        raise StructuralError(f"msrb_forward: skip is only accepted by the up variant, not {p.variant!r}")
    else:
        target = None

    out = None
    caches = []
    for k in p.kernels:
        y, c = dsconv_forward(x, k, target_size=target)
        caches.append(c)
        out = y if out is None else out + y
    if skip is not None:
        T.check_same_shape(out, skip, "msrb skip")
        n_skip = len(p.kernels) if skip_mode == "literal" else 1
        out = out + skip * skip.dtype.type(n_skip)
    if return_cache:
        return out, MsrbCache(caches, p.variant, len(p.kernels), None if skip is None else skip.shape)
    return out


def msrb_backward(cache: MsrbCache, dout: np.ndarray, p: MsrbParams, skip_mode: str = "literal"):
    """Returns ``(dx, dskip or None, [DSConvGrads per kernel])``."""
    dx = None
    grads = []
    for c, k in zip(cache.kernel_caches, p.kernels):
        d, g = dsconv_backward(c, dout, k)
        grads.append(g)
        dx = d if dx is None else dx + d
    dskip = None
    if cache.skip_shape is not None:
        n_skip = cache.kappa if skip_mode == "literal" else 1
        dskip = dout * dout.dtype.type(n_skip)
    return dx, dskip, grads


def msrb_param_count(C: int, kappa: int) -> int:
    return kappa * 2 * (C + C)


# ---------------------------------------------------------------------------
# full network


@dataclass
class NetCache:
    skips: list  # S_0 .. S_L
    enc: list  # MsrbCache per encoder stage 1..L
    bottleneck: Optional[MsrbCache] = None
    dec: dict = field(default_factory=dict)  # stage l -> MsrbCache


def _check_input(x: np.ndarray, config: NetworkConfig):
    T.check_rank4(x, "network input")
    if x.shape[1] != config.channels:
        raise StructuralError(f"network input must have {config.channels} channels, got {x.shape[1]}")
    need = 2 ** config.stages
    if x.shape[2] < need or x.shape[3] < need:
        raise StructuralError(f"network input must be at least {need}x{need}, got {x.shape[2]}x{x.shape[3]}")


def net_forward(x: np.ndarray, net: Network, return_cache: bool = False):
    """Run the network. Returns ``(O_1, ..., O_L)``, finest first.

    ``O_1`` is the enhanced image (unclamped). With ``return_cache`` the
    result is ``(outputs, cache)``.
    """
    cfg = net.config
    _check_input(x, cfg)
    x = np.asarray(x, dtype=net.dtype)
    L = cfg.stages
    cache = NetCache(skips=[x], enc=[])
    s = x
    for l in range(1, L + 1):
        s, c = msrb_forward(s, net.block(("enc", l), "down"), return_cache=True)
        cache.enc.append(c)
        cache.skips.append(s)
    cur, cache.bottleneck = msrb_forward(s, net.block(("bottleneck", L + 1), "plain"), return_cache=True)

    outputs = {}
    for l in range(L, 0, -1):
        skip = cache.skips[l - 1]
        up, c = msrb_forward(cur, net.block(("dec", l), "up"), skip=skip,
                             skip_mode=cfg.skip_mode, return_cache=True)
        cache.dec[l] = c
        cur = up + skip
        outputs[l] = cur
    result = tuple(outputs[l] for l in range(1, L + 1))
    if return_cache:
        return result, cache
    return result


def zero_grads(net: Network) -> list:
    return [[DSConvGrads.zeros_like(k) for k in b.kernels] for b in net.stage_params]


def net_backward(cache: NetCache, douts: Sequence[np.ndarray], net: Network):
    """Reverse pass. ``douts`` are upstream gradients for ``O_1..O_L``.

    Returns ``(dx, grads)`` with ``grads[block][kernel]`` a ``DSConvGrads``;
    tied blocks sum contributions from every site that uses them.
    """
    cfg = net.config
    L = cfg.stages
    if len(douts) != L:
        raise StructuralError(f"net_backward: expected {L} upstream gradients, got {len(douts)}")
    for l in range(1, L + 1):
        want = cache.skips[l - 1].shape
        if douts[l - 1].shape != want:
            raise StructuralError(f"net_backward: dO{l} shape {douts[l - 1].shape} != {want}")

    grads = zero_grads(net)

    def _acc(site, kernel_grads):
        for total, g in zip(grads[cfg.block_index(site)], kernel_grads):
            total.accumulate(g)

    dskips = [np.zeros_like(s) for s in cache.skips]
    dcur = None
    for l in range(1, L + 1):
        g = douts[l - 1] if dcur is None else douts[l - 1] + dcur
        dskips[l - 1] += g
        p = net.block(("dec", l), "up")
        dcur, dskip, kg = msrb_backward(cache.dec[l], g, p, cfg.skip_mode)
        dskips[l - 1] += dskip
        _acc(("dec", l), kg)

    p = net.block(("bottleneck", L + 1), "plain")
    d, _, kg = msrb_backward(cache.bottleneck, dcur, p)
    dskips[L] += d
    _acc(("bottleneck", L + 1), kg)

    for l in range(L, 0, -1):
        p = net.block(("enc", l), "down")
        d, _, kg = msrb_backward(cache.enc[l - 1], dskips[l], p)
        dskips[l - 1] += d
        _acc(("enc", l), kg)
    return dskips[0], grads


def net_param_count(net: Network) -> int:
    return sum(b.num_scalars() for b in net.stage_params)


def config_param_count(config: NetworkConfig) -> int:
    return config.num_blocks * msrb_param_count(config.channels, config.kappa)


# ---------------------------------------------------------------------------
# FLOP report


def _pooled(h, w):
    return h // 2, w // 2


def net_flop_report(config: NetworkConfig, H: int, W: int) -> dict:
    """Itemized FLOPs at input size (H, W).

    Kernel lines use the 15CHW-per-kernel formula at each kernel's operating
    resolution: input resolution for down blocks, target resolution for up
    blocks. Pooling, resampling, subpath sums and skip additions are booked
    under ``aux`` and kept out of ``kernel_total``.
    """
    if isinstance(config, Network):
        config = config.config
    L = config.stages
    C = config.channels
    need = 2 ** L
    if H < need or W < need:
        raise StructuralError(f"flop report needs H, W >= {need}, got {H}x{W}")
    kappa = config.kappa
    sizes = [(H, W)]
    for _ in range(L):
        sizes.append(_pooled(*sizes[-1]))

    rows = []

    def _block(name, op_hw, out_hw, kind):
        h, w = op_hw
        kernel_lines = [
            {"dia": d, "h": h, "w": w, "flops": dsconv_flop_count(C, h, w)["total"]} for d in config.dia_set
        ]
        oh, ow = out_hw
        aux = {"subpath_sum": (kappa - 1) * C * oh * ow}
        if kind == "down":
            # 3 adds + 1 scale per pooled output, per kernel
            aux["pool"] = kappa * 4 * C * oh * ow
        if kind == "up":
            # 4 multiplies + 3 adds per resampled element, per kernel
            aux["resample"] = kappa * 7 * C * h * w
            n_inner = kappa if config.skip_mode == "literal" else 1
            aux["skip_add"] = (n_inner + 1) * C * oh * ow
        rows.append({
            "site": name,
            "kernels": kernel_lines,
            "kernel_flops": sum(k["flops"] for k in kernel_lines),
            "aux": aux,
            "aux_flops": sum(aux.values()),
        })

    for l in range(1, L + 1):
        _block(f"enc{l}", sizes[l - 1], sizes[l], "down")
    _block("bottleneck", sizes[L], sizes[L], "plain")
    for l in range(L, 0, -1):
        _block(f"dec{l}", sizes[l - 1], sizes[l - 1], "up")

    kernel_total = sum(r["kernel_flops"] for r in rows)
    aux_total = sum(r["aux_flops"] for r in rows)
    return {
        "height": H,
        "width": W,
        "dia_set": list(config.dia_set),
        "tie_mode": config.tie_mode,
        "skip_mode": config.skip_mode,
        "blocks": rows,
        "kernel_total": kernel_total,
        "aux_total": aux_total,
        "grand_total": kernel_total + aux_total,
    }


def format_flop_report(report: dict) -> str:
    lines = [f"flops at {report['height']}x{report['width']}, dia_set "
             + "+".join(str(d) for d in report["dia_set"])]
    for r in report["blocks"]:
        lines.append(f"  {r['site']:<11} kernels {r['kernel_flops']:>12,d}   aux {r['aux_flops']:>10,d}")
        for k in r["kernels"]:
            lines.append(f"    dsconv dia={k['dia']} @ {k['h']}x{k['w']}: {k['flops']:,d}")
    lines.append(f"kernel_total: {report['kernel_total']}")
    lines.append(f"aux_total: {report['aux_total']}")
    lines.append(f"grand_total: {report['grand_total']}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# checkpoints


def network_to_dict(net: Network) -> dict:
    cfg = net.config
    return {
        "format_version": FORMAT_VERSION,
        "dia_set": list(cfg.dia_set),
        "stages": cfg.stages,
        "channels": cfg.channels,
        "tie_mode": cfg.tie_mode,
        "skip_mode": cfg.skip_mode,
        "stage_params": [
            {
                "stage": i + 1,
                "kernels": [
                    {
                        "dia": k.dia,
                        "w1": [float(v) for v in k.w1],
                        "b1": [float(v) for v in k.b1],
                        "w2": [float(v) for v in k.w2],
                        "b2": [float(v) for v in k.b2],
                    }
                    for k in b.kernels
                ],
            }
            for i, b in enumerate(net.stage_params)
        ],
    }


def _require_keys(obj, keys, where):
    if not isinstance(obj, dict):
        raise CheckpointError(f"{where}: expected an object")
    unknown = sorted(set(obj) - set(keys))
    if unknown:
        raise CheckpointError(f"{where}: unknown field(s) {unknown}")
    missing = [k for k in keys if k not in obj]
    if missing:
        raise CheckpointError(f"{where}: missing field(s) {missing}")


def network_from_dict(doc: dict, dtype=T.DEFAULT_DTYPE) -> Network:
    _require_keys(doc, ["format_version", "dia_set", "stages", "channels", "tie_mode", "skip_mode",
                        "stage_params"], "checkpoint")
    if doc["format_version"] != FORMAT_VERSION:
        raise CheckpointError(f"format_version: expected {FORMAT_VERSION}, got {doc['format_version']!r}")
    try:
        cfg = NetworkConfig(tuple(doc["dia_set"]), doc["stages"], doc["channels"],
                            doc["tie_mode"], doc["skip_mode"])
    except (StructuralError, TypeError) as e:
        raise CheckpointError(f"config fields: {e}") from None
    blocks_doc = doc["stage_params"]
    if not isinstance(blocks_doc, list) or len(blocks_doc) != cfg.num_blocks:
        raise CheckpointError(f"stage_params: expected {cfg.num_blocks} entries for {cfg.tie_mode}")
    C = cfg.channels
    blocks = []
    for i, bd in enumerate(blocks_doc):
        where = f"stage_params[{i}]"
        _require_keys(bd, ["stage", "kernels"], where)
        if bd["stage"] != i + 1:
            raise CheckpointError(f"{where}.stage: expected {i + 1}, got {bd['stage']!r}")
        if not isinstance(bd["kernels"], list) or len(bd["kernels"]) != cfg.kappa:
            raise CheckpointError(f"{where}.kernels: expected {cfg.kappa} kernels")
        kernels = []
        for j, kd in enumerate(bd["kernels"]):
            kw = f"{where}.kernels[{j}]"
            _require_keys(kd, ["dia", "w1", "b1", "w2", "b2"], kw)
            if kd["dia"] != cfg.dia_set[j]:
                raise CheckpointError(f"{kw}.dia: expected {cfg.dia_set[j]}, got {kd['dia']!r}")
            arrays = []
            for name in ("w1", "b1", "w2", "b2"):
                vals = kd[name]
                if not isinstance(vals, list) or len(vals) != C:
                    raise CheckpointError(f"{kw}.{name}: expected {C} scalars")
                if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in vals):
                    raise CheckpointError(f"{kw}.{name}: non-numeric scalar")
                arrays.append(np.array(vals, dtype=np.float64).astype(dtype))
            kernels.append(DSConvParams(*arrays, dia=kd["dia"]))
        blocks.append(MsrbParams(kernels))
    return Network(cfg, blocks)


def save_checkpoint(net: Network, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(network_to_dict(net), indent=1)
    path.write_text(text + "\n")


def load_checkpoint(path, dtype=T.DEFAULT_DTYPE) -> Network:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: malformed JSON ({e})") from None
    for v in _iter_numbers(doc):
        if not math.isfinite(v):
            raise CheckpointError(f"{path}: non-finite scalar")
    return network_from_dict(doc, dtype=dtype)


def _iter_numbers(obj):
    if isinstance(obj, dict):
        for v in obj.values():
            yield from _iter_numbers(v)
    elif isinstance(obj, list):
        for v in obj:
            yield from _iter_numbers(v)
    elif isinstance(obj, float):
        yield obj
