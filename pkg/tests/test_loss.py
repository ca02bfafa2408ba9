import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lienet import tensor as T
from lienet.gradcheck import TOLERANCE, check_total_loss
from lienet.loss import (
    LossWeights,
    grad_loss,
    ms_ssim_loss,
    smooth_l1,
    smooth_l1_elem_grad,
    total_loss,
    total_loss_per_item,
)
from lienet.ssim import MS_WEIGHTS, ms_ssim, num_scales, scale_weights, ssim_per_image


def image(seed, shape=(1, 3, 32, 32)):
    return np.random.default_rng(seed).uniform(0.1, 0.9, size=shape)


def pyramid(g):
    return [g] + [T.bilinear_resize(g, g.shape[2] // 2**k, g.shape[3] // 2**k) for k in (1, 2)]


# smooth L1


@pytest.mark.parametrize("d,expected", [(0.5, 0.125), (-0.5, 0.125), (2.0, 1.5), (-2.0, 1.5), (0.0, 0.0)])
def test_smooth_l1_branches(d, expected):
    g = image(0, (2, 3, 5, 4))
    assert smooth_l1(g + d, g) == pytest.approx(expected, abs=1e-12)


def test_smooth_l1_derivative_continuous_at_one():
    x = np.array([1.0 - 1e-12, 1.0, -1.0, -1.0 + 1e-12])
    assert np.allclose(smooth_l1_elem_grad(x), [1.0, 1.0, -1.0, -1.0])


def test_smooth_l1_shape_check():
    with pytest.raises(T.StructuralError):
        smooth_l1(np.zeros((1, 3, 2, 2)), np.zeros((1, 3, 2, 3)))


# MS-SSIM


def test_scale_count_and_weights():
    assert num_scales(180, 180) == 5
    assert num_scales(96, 96) == 4
    assert num_scales(32, 32) == 2
    assert num_scales(21, 40) == 1
    assert num_scales(10, 40) == 0
    assert scale_weights(5).tolist() == pytest.approx(list(MS_WEIGHTS))
    assert scale_weights(2).sum() == pytest.approx(1.0)
    assert scale_weights(4).tolist() == pytest.approx([w / sum(MS_WEIGHTS[:4]) for w in MS_WEIGHTS[:4]])


def test_ms_ssim_identity():
    g = image(1, (2, 1, 96, 96))
    assert np.allclose(ms_ssim(g, g), 1.0, atol=1e-12)
    assert ms_ssim_loss(image(2), image(2)) == pytest.approx(0.0, abs=1e-6)


def test_ms_ssim_gradient_zero_at_identity():
    g = image(3)
    _, d = ms_ssim_loss(g, g, return_grad=True)
    assert np.abs(d).max() < 1e-12


def test_ms_ssim_constant_images():
    g = np.full((1, 3, 24, 24), 0.4)
    assert ms_ssim_loss(g, g.copy()) == pytest.approx(0.0, abs=1e-6)


def test_ms_ssim_loss_increases_with_noise():
    g = image(4, (1, 3, 64, 64))
    noise = np.random.default_rng(5).normal(size=g.shape)
    losses = [ms_ssim_loss(np.clip(g + s * noise, 0, 1), g) for s in (0.01, 0.05, 0.1)]
    assert losses[0] < losses[1] < losses[2]


def test_single_scale_matches_ssim():
    # below 22 pixels only one scale fits, and it is plain SSIM
    a, b = image(6, (1, 1, 20, 20)), image(7, (1, 1, 20, 20))
    assert ms_ssim(a, b)[0] == pytest.approx(ssim_per_image(a, b)[0], abs=1e-12)


def test_ms_ssim_too_small():
    with pytest.raises(T.StructuralError):
        ms_ssim(np.zeros((1, 1, 10, 30)), np.zeros((1, 1, 10, 30)))


# gradient loss


def test_grad_loss_zero_on_resized_target():
    g = image(8)
    assert grad_loss(pyramid(g), g) == 0.0


def test_grad_loss_zero_on_constants():
    g = np.full((1, 3, 32, 32), 0.3)
    outs = [np.full((1, 3, 32 // 2**k, 32 // 2**k), c) for k, c in enumerate((0.9, 0.1, 0.5))]
    assert grad_loss(outs, g) == 0.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(-2, 2, allow_nan=False))
def test_grad_loss_invariant_to_constant_shift(seed, c):
    rng = np.random.default_rng(seed)
    g = rng.uniform(size=(1, 3, 16, 16))
    outs = [rng.uniform(size=(1, 3, 16 // 2**k, 16 // 2**k)) for k in range(3)]
    base = grad_loss(outs, g)
    assert grad_loss([o + c for o in outs], g + c) == pytest.approx(base, rel=1e-9, abs=1e-12)


def test_grad_loss_ignores_third_output_when_weight_zero():
    g = image(9)
    outs = pyramid(g)
    w = LossWeights(omega=(1.0, 1.0, 0.0))
    base = grad_loss(outs, g, w)
    outs[2] = outs[2] + np.random.default_rng(0).normal(size=outs[2].shape)
    assert grad_loss(outs, g, w) == base
    _, d = grad_loss(outs, g, w, return_grad=True)
    assert not d[2].any()


def test_grad_loss_uses_per_scale_weights():
    g = image(10)
    rng = np.random.default_rng(11)
    outs = [o + 0.1 * rng.normal(size=o.shape) for o in pyramid(g)]
    per = [grad_loss([o], g, LossWeights(omega=(1.0,)))
           for o in (outs[0], T.bilinear_resize(outs[1], 32, 32), T.bilinear_resize(outs[2], 32, 32))]
    only = []
    for k in range(3):
        om = [0.0, 0.0, 0.0]
        om[k] = 1.0
        only.append(grad_loss(outs, g, LossWeights(omega=tuple(om))))
    assert only[0] == pytest.approx(per[0])
    assert grad_loss(outs, g) == pytest.approx(only[0] + only[1] + 0.04 * only[2])


# total


def test_total_zero_on_perfect_prediction():
    g = image(12)
    lb = total_loss(pyramid(g), g)
    assert (lb.rec, lb.grad) == (0.0, 0.0)
    assert lb.ms_ssim == pytest.approx(0.0, abs=1e-6)
    assert lb.total == pytest.approx(0.0, abs=1e-6)


def test_total_is_weighted_sum():
    g = image(13)
    rng = np.random.default_rng(14)
    outs = [o + 0.1 * rng.normal(size=o.shape) for o in pyramid(g)]
    lb = total_loss(outs, g, return_grad=False)
    assert lb.total == 0.975 * lb.rec + 0.025 * lb.ms_ssim + 1.0 * lb.grad
    assert lb.rec == smooth_l1(outs[0], g)
    assert lb.ms_ssim == ms_ssim_loss(outs[0], g)
    assert lb.grad == grad_loss(outs, g)


def test_total_rec_only():
    g = image(15)
    outs = [o + 0.2 for o in pyramid(g)]
    w = LossWeights(lambda_ms_ssim=0.0, lambda_grad=0.0)
    assert total_loss(outs, g, w).total == 0.975 * smooth_l1(outs[0], g)


def test_per_item_mean_matches_total():
    rng = np.random.default_rng(16)
    g = rng.uniform(size=(3, 3, 24, 24))
    outs = [o + 0.1 * rng.normal(size=o.shape) for o in pyramid(g)]
    assert total_loss_per_item(outs, g).mean() == pytest.approx(total_loss(outs, g).total, rel=1e-12)


def test_total_gradient_on_32px_case():
    assert check_total_loss(0, size=32) <= TOLERANCE


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        LossWeights(lambda_rec=-1.0)
