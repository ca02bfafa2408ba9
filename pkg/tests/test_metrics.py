import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lienet import tensor as T
from lienet.imageio import read_image, synth_pairs, write_image
from lienet.metrics import PSNR_CAP, EvalReport, ImageScore, enhance, evaluate, psnr, ssim, write_report
from lienet.network import build_network, save_checkpoint


def naive_ssim(a, b):
    """Sliding-window SSIM on 2-D arrays: full 11x11 Gaussian, one window at a time."""
    x = np.arange(11) - 5.0
    g1 = np.exp(-(x**2) / (2 * 1.5**2))
    win = np.outer(g1, g1)
    win /= win.sum()
    c1, c2 = 0.01**2, 0.03**2
    H, W = a.shape
    vals = []
    for r in range(H - 10):
        for c in range(W - 10):
            pa, pb = a[r : r + 11, c : c + 11], b[r : r + 11, c : c + 11]
            ma, mb = (win * pa).sum(), (win * pb).sum()
            va = (win * (pa - ma) ** 2).sum()
            vb = (win * (pb - mb) ** 2).sum()
            cov = (win * (pa - ma) * (pb - mb)).sum()
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return float(np.mean(vals))


# PSNR


def test_psnr_values():
    a = np.zeros((1, 3, 4, 4))
    assert psnr(a, a + 0.1) == pytest.approx(20.0)
    assert psnr(a, a) == PSNR_CAP == 99.0
    assert psnr(a, np.ones_like(a)) == 0.0


def test_psnr_shape_mismatch():
    with pytest.raises(T.StructuralError):
        psnr(np.zeros((1, 3, 4, 4)), np.zeros((1, 3, 4, 5)))


# SSIM


@pytest.mark.parametrize("seed", range(3))
def test_ssim_matches_naive_reference(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(size=(32, 32)), rng.uniform(size=(32, 32))
    assert abs(ssim(a[None, None], b[None, None]) - naive_ssim(a, b)) <= 1e-6


def test_ssim_color_uses_grayscale():
    rng = np.random.default_rng(4)
    a, b = rng.uniform(size=(1, 3, 20, 24)), rng.uniform(size=(1, 3, 20, 24))
    ga, gb = T.to_grayscale(a)[0, 0], T.to_grayscale(b)[0, 0]
    assert ssim(a, b) == pytest.approx(naive_ssim(ga, gb), abs=1e-9)


def test_ssim_identity():
    a = np.random.default_rng(5).uniform(size=(1, 3, 16, 16))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_ssim_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(size=(1, 1, 14, 17)), rng.uniform(size=(1, 1, 14, 17))
    s = ssim(a, b)
    assert s == pytest.approx(ssim(b, a), abs=1e-12)
    assert -1.0 <= s <= 1.0


def test_ssim_too_small():
    with pytest.raises(T.StructuralError):
        ssim(np.zeros((1, 1, 10, 20)), np.zeros((1, 1, 10, 20)))


# report and evaluation


def test_report_means_and_json(tmp_path):
    rep = EvalReport([ImageScore("a", 20.0, 0.5), ImageScore("b", 30.0, 0.7)])
    assert rep.mean_psnr == 25.0 and rep.mean_ssim == pytest.approx(0.6)
    write_report(rep, tmp_path / "r" / "report.json")
    doc = json.loads((tmp_path / "r" / "report.json").read_text())
    assert doc["images"][1] == {"name": "b", "psnr": 30.0, "ssim": 0.7}
    assert doc["mean_psnr"] == 25.0
    assert "mean" in rep.to_text().splitlines()[-1]


@pytest.fixture(scope="module")
def pair_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("eval")
    synth_pairs(4, 24, 0, root)
    return root


def test_evaluate_is_transparent(pair_dir, tmp_path):
    net = build_network(seed=2)
    save_checkpoint(net, tmp_path / "ck.json")
    rep = evaluate(pair_dir, tmp_path / "ck.json")
    assert [r.name for r in rep.images] == ["0000", "0001", "0002", "0003"]
    for r in rep.images:
        low = read_image(pair_dir / "low" / f"{r.name}.png")
        high = read_image(pair_dir / "high" / f"{r.name}.png", np.float64)
        out = enhance(net, low)
        assert r.psnr == psnr(out, high)
        assert r.ssim == ssim(out, high)
    assert rep.mean_psnr == pytest.approx(np.mean([r.psnr for r in rep.images]))
    assert rep.mean_ssim == pytest.approx(np.mean([r.ssim for r in rep.images]))


def test_evaluate_name_subset(pair_dir):
    rep = evaluate(pair_dir, build_network(), ["0002"])
    assert [r.name for r in rep.images] == ["0002"]
    with pytest.raises(FileNotFoundError, match="0009"):
        evaluate(pair_dir, build_network(), ["0009"])


def test_enhance_clamps():
    out = enhance(build_network(seed=0), np.full((1, 3, 16, 16), 50.0, np.float32))
    assert out.max() <= 1.0 and out.min() >= 0.0


def test_psnr_of_round_tripped_image(tmp_path):
    img = np.random.default_rng(0).uniform(size=(1, 3, 8, 8))
    write_image(img, tmp_path / "x.png")
    # 8-bit quantization error is at most half a step
    assert psnr(read_image(tmp_path / "x.png", np.float64), img) >= 10 * np.log10(1 / (0.5 / 255) ** 2)
