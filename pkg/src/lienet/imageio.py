"""PNG codec boundary, the low/high dataset layout, and a synthetic pair generator."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from lienet import tensor as T

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png",)


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class ImagePair:
    name: str
    low: Path
    high: Path

    def load(self, dtype=T.DEFAULT_DTYPE):
        return read_image(self.low, dtype), read_image(self.high, dtype)


def read_image(path, dtype=T.DEFAULT_DTYPE) -> np.ndarray:
    """Read an 8-bit image as a (1, 3, H, W) tensor with values ``v / 255``."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.mode not in ("RGB", "RGBA", "L", "LA", "P"):
                raise OSError(f"unsupported mode {im.mode}")
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except OSError as e:
        raise OSError(f"cannot read image {path}: {e}") from None
    # divide in float64 so v / 255 is correctly rounded before any narrowing
    t = (arr.astype(np.float64) / 255.0).transpose(2, 0, 1)[None]
    return np.ascontiguousarray(t, dtype=dtype)


def quantize(t: np.ndarray) -> np.ndarray:
    """(1, 3, H, W) float tensor -> (H, W, 3) uint8, clamped, round half up."""
    if t.ndim != 4 or t.shape[0] != 1 or t.shape[1] != 3:
        raise T.StructuralError(f"write_image expects a (1, 3, H, W) tensor, got {t.shape}")
    v = np.clip(np.asarray(t[0], dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(v + 0.5).astype(np.uint8).transpose(1, 2, 0)


def write_image(t: np.ndarray, path) -> None:
    path = Path(path)
    img = Image.fromarray(quantize(t))
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        img.save(path, format="PNG")
    except OSError as e:
        raise OSError(f"cannot write image {path}: {e}") from None


def _stems(d: Path) -> dict:
    return {p.stem: p for p in sorted(d.iterdir()) if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES}


def scan_dataset(root) -> list:
    """Pair ``root/low/<name>.png`` with ``root/high/<name>.png``, sorted by name."""
    root = Path(root)
    for sub in ("low", "high"):
        if not (root / sub).is_dir():
            raise DatasetError(f"dataset {root} has no '{sub}/' subdirectory")
    low, high = _stems(root / "low"), _stems(root / "high")
    unmatched = sorted(set(low) ^ set(high))
    if unmatched:
        raise DatasetError(f"unmatched image(s) in {root}: {', '.join(unmatched)}")
    if not low:
        log.warning("dataset %s is empty", root)
    return [ImagePair(name, low[name], high[name]) for name in sorted(low)]


# ---------------------------------------------------------------------------
# synthetic pairs


def _normal_light_image(rng: np.random.Generator, size: int) -> np.ndarray:
    """Smooth color gradient background with a few flat-colored shapes, (3, H, W)."""
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    c0 = rng.uniform(0.25, 0.9, size=3)
    c1 = rng.uniform(0.25, 0.9, size=3)
    angle = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(angle) * xx + np.sin(angle) * yy)
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-12)
    img = c0[:, None, None] * (1 - ramp) + c1[:, None, None] * ramp
    # low-frequency ripple
    fy, fx = rng.uniform(0.5, 3.0, size=2)
    img *= 0.85 + 0.15 * np.sin(2 * np.pi * (fy * yy + fx * xx) + rng.uniform(0, 2 * np.pi))

    for _ in range(int(rng.integers(2, 6))):
        color = rng.uniform(0.05, 1.0, size=3)
        cy, cx = rng.uniform(0, 1, size=2)
        if rng.random() < 0.5:
            r = rng.uniform(0.08, 0.25)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        else:
            hh, ww = rng.uniform(0.1, 0.35, size=2)
            mask = (np.abs(yy - cy) < hh / 2) & (np.abs(xx - cx) < ww / 2)
        img[:, mask] = color[:, None]
    return np.clip(img, 0.0, 1.0)


def darken(high: np.ndarray, rng: np.random.Generator):
    """low = clamp(gain * high**gamma + noise); returns (low, (gamma, gain, sigma))."""
    gamma = rng.uniform(2.0, 5.0)
    gain = rng.uniform(0.1, 0.5)
    sigma = rng.uniform(0.0, 0.02)
    low = gain * high**gamma + rng.normal(0.0, sigma, size=high.shape)
    return np.clip(low, 0.0, 1.0), (gamma, gain, sigma)


def synth_pairs(count: int, size: int, seed: int, root) -> list:
    """Write ``count`` seeded low/high PNG pairs under ``root``; returns their names."""
    if size < 16:
        raise T.StructuralError(f"synthetic image size must be >= 16, got {size}")
    root = Path(root)
    rng = np.random.default_rng(seed)
    width = max(4, len(str(count - 1)))
    names = []
    for i in range(count):
        name = f"{i:0{width}d}"
        high = _normal_light_image(rng, size)
        low, _ = darken(high, rng)
        write_image(high[None], root / "high" / f"{name}.png")
        write_image(low[None], root / "low" / f"{name}.png")
        names.append(name)
    return names
