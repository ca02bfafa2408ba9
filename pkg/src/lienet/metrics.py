"""Full-reference image quality metrics and a dataset evaluation runner."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from lienet import tensor as T
from lienet.imageio import read_image, scan_dataset
from lienet.network import Network, load_checkpoint, net_forward
from lienet.ssim import WIN_SIZE, ssim_per_image

PSNR_CAP = 99.0


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    T.check_same_shape(a, b, "psnr")
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean Gaussian-window SSIM of the grayscale images, averaged over the batch."""
    T.check_same_shape(a, b, "ssim")
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if min(a.shape[2:]) < WIN_SIZE:
        raise T.StructuralError(f"ssim needs images of at least {WIN_SIZE}x{WIN_SIZE}, got {a.shape[2:]}")
    if a.shape[1] == 3:
        a, b = T.to_grayscale(a), T.to_grayscale(b)
    return float(ssim_per_image(a, b).mean())


@dataclass
class ImageScore:
    name: str
    psnr: float
    ssim: float


@dataclass
class EvalReport:
    images: list = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r.psnr for r in self.images])) if self.images else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r.ssim for r in self.images])) if self.images else float("nan")

    def to_dict(self) -> dict:
        return {
            "images": [asdict(r) for r in self.images],
            "mean_psnr": self.mean_psnr,
            "mean_ssim": self.mean_ssim,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def to_text(self) -> str:
        width = max([4] + [len(r.name) for r in self.images])
        lines = [f"{'name':<{width}}  {'psnr':>8}  {'ssim':>7}"]
        for r in self.images:
            lines.append(f"{r.name:<{width}}  {r.psnr:8.3f}  {r.ssim:7.4f}")
        lines.append(f"{'mean':<{width}}  {self.mean_psnr:8.3f}  {self.mean_ssim:7.4f}")
        return "\n".join(lines)


def enhance(net: Network, low: np.ndarray) -> np.ndarray:
    """Run the network and clamp the enhanced image to [0, 1]."""
    return np.clip(net_forward(low, net)[0], 0.0, 1.0)


def evaluate(root, checkpoint, names: Optional[Sequence[str]] = None) -> EvalReport:
    """Score enhanced low images against their references.

    ``checkpoint`` is a path or a ``Network``. ``names`` restricts the run to
    a subset of pairs (e.g. a held-out split); unknown names are an error.
    """
    net = checkpoint if isinstance(checkpoint, Network) else load_checkpoint(checkpoint)
    pairs = scan_dataset(root)
    if names is not None:
        by_name = {p.name: p for p in pairs}
        missing = [n for n in names if n not in by_name]
        if missing:
            raise FileNotFoundError(f"pair(s) not found in {root}: {', '.join(missing)}")
        pairs = [by_name[n] for n in names]
    report = EvalReport()
    for pair in pairs:
        low = read_image(pair.low, net.dtype)
        high = read_image(pair.high, np.float64)
        if low.shape != high.shape:
            raise T.StructuralError(f"pair {pair.name}: low {low.shape} and high {high.shape} differ")
        out = enhance(net, low)
        report.images.append(ImageScore(pair.name, psnr(out, high), ssim(out, high)))
    return report


def write_report(report: EvalReport, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_json() + "\n")
