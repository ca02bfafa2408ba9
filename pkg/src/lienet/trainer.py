"""Adam with step learning-rate decay, the data pipeline, and the training loop."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from lienet import tensor as T
from lienet.imageio import read_image, scan_dataset
from lienet.loss import LossWeights, total_loss
from lienet.network import Network, NetworkConfig, build_network, net_backward, net_forward, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 360
    base_lr: float = 0.01
    batch_size: int = 40
    lr_gamma: float = 0.1
    lr_step_epochs: int = 40
    crop: int = 180
    train_fraction: float = 0.9
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # False writes 0.0 in the "seconds" column so logs are byte-reproducible
    log_timing: bool = True
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        for name in ("epochs", "base_lr", "batch_size", "lr_gamma", "lr_step_epochs", "crop", "eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"TrainConfig.{name} must be positive, got {getattr(self, name)!r}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError(f"TrainConfig.train_fraction must be in (0, 1), got {self.train_fraction}")


class TrainingDiverged(RuntimeError):
    pass


def lr_at_epoch(epoch: int, cfg: TrainConfig = TrainConfig()) -> float:
    """Step decay: ``base_lr * gamma ** (epoch // lr_step_epochs)`` (epoch is 0-based)."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return cfg.base_lr * cfg.lr_gamma ** (epoch // cfg.lr_step_epochs)


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params, grads, state: AdamState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise T.StructuralError("adam_step: params, grads and state differ in length")
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise T.StructuralError(f"adam_step: gradient shape {g.shape} != parameter shape {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def flat_grads(grads) -> list:
    """Flatten ``net_backward`` parameter grads into ``Network.parameters()`` order."""
    return [a for block in grads for kernel in block for a in kernel.arrays()]


# ---------------------------------------------------------------------------
# data


def center_crop(img: np.ndarray, size: int, name: str = "image") -> np.ndarray:
    H, W = img.shape[2:]
    if H < size or W < size:
        raise T.StructuralError(f"{name}: {H}x{W} is smaller than the {size}x{size} crop")
    r0 = (H - size) // 2
    c0 = (W - size) // 2
    return img[:, :, r0 : r0 + size, c0 : c0 + size]


def split_dataset(items, seed: int, train_fraction: float = 0.9):
    """Seeded shuffle, then the first ``ceil(train_fraction * n)`` items train."""
    items = list(items)
    if not items:
        raise T.StructuralError("split_dataset: no items to split")
    order = np.random.default_rng(seed).permutation(len(items))
    n_train = math.ceil(train_fraction * len(items))
    train = [items[i] for i in order[:n_train]]
    test = [items[i] for i in order[n_train:]]
    return train, test


def load_pairs(pairs, crop: int, dtype=T.DEFAULT_DTYPE):
    lows, highs = [], []
    for p in pairs:
        low, high = p.load(dtype)
        lows.append(center_crop(low, crop, str(p.low)))
        highs.append(center_crop(high, crop, str(p.high)))
    return np.concatenate(lows), np.concatenate(highs)


# ---------------------------------------------------------------------------
# loop


def train_step(net: Network, low: np.ndarray, high: np.ndarray, state: AdamState, lr: float,
               cfg: TrainConfig):
    outs, cache = net_forward(low, net, return_cache=True)
    lb = total_loss(outs, high, cfg.loss_weights)
    if not math.isfinite(lb.total):
        return lb
    _, grads = net_backward(cache, lb.d_outputs, net)
    adam_step(net.parameters(), flat_grads(grads), state, lr, cfg.beta1, cfg.beta2, cfg.eps)
    return lb


def train(root, cfg: TrainConfig = TrainConfig(), net_cfg: NetworkConfig = NetworkConfig(),
          out_dir=None, net: Optional[Network] = None):
    """Train on ``root`` (low/ + high/ layout). Returns ``(net, log_rows, split)``.

    With ``out_dir`` set, writes ``train_log.jsonl`` (one row per epoch),
    ``split.json``, ``checkpoint.json`` at the end and
    ``checkpoint_epoch{N:04d}.json`` every ``lr_step_epochs`` epochs.
    """
    pairs = scan_dataset(root)
    if len(pairs) < 2:
        raise T.StructuralError(f"dataset {root} needs at least 2 pairs, found {len(pairs)}")
    train_pairs, test_pairs = split_dataset(pairs, cfg.seed, cfg.train_fraction)
    lows, highs = load_pairs(train_pairs, cfg.crop)
    if net is None:
        net = build_network(net_cfg, seed=cfg.seed)
    state = AdamState.zeros_like(net.parameters())
    rng = np.random.default_rng(cfg.seed + 1)

    out = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        split = {"train": [p.name for p in train_pairs], "test": [p.name for p in test_pairs]}
        (out / "split.json").write_text(json.dumps(split, indent=1) + "\n")
        log_file = open(out / "train_log.jsonl", "w")

    rows = []
    n = len(lows)
    try:
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            lr = lr_at_epoch(epoch, cfg)
            order = rng.permutation(n)
            sums = dict(rec=0.0, ms_ssim=0.0, grad=0.0, total=0.0)
            for b, start in enumerate(range(0, n, cfg.batch_size)):
                idx = order[start : start + cfg.batch_size]
                lb = train_step(net, lows[idx], highs[idx], state, lr, cfg)
                vals = lb.as_dict()
                if not all(math.isfinite(v) for v in vals.values()):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch + 1}, batch {b + 1}: {vals}")
                for k, v in vals.items():
                    sums[k] += v * len(idx)
            row = {"epoch": epoch + 1, "lr": lr}
            row.update({k: v / n for k, v in sums.items()})
            row["seconds"] = time.perf_counter() - t0 if cfg.log_timing else 0.0
            rows.append(row)
            log.info("epoch %d lr %.2e total %.5f", epoch + 1, lr, row["total"])
            if log_file is not None:
                log_file.write(json.dumps(row) + "\n")
                log_file.flush()
                if (epoch + 1) % cfg.lr_step_epochs == 0:
                    save_checkpoint(net, out / f"checkpoint_epoch{epoch + 1:04d}.json")
    finally:
        if log_file is not None:
            log_file.close()
    if out is not None:
        save_checkpoint(net, out / "checkpoint.json")
    return net, rows, (train_pairs, test_pairs)


def config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["loss_weights"]["omega"] = list(d["loss_weights"]["omega"])
    return d
