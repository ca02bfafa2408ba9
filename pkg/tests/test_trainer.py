import json
import math

import numpy as np
import pytest

from lienet import tensor as T
from lienet.imageio import synth_pairs
from lienet.loss import total_loss
from lienet.network import NetworkConfig, build_network, load_checkpoint, net_backward, net_forward
from lienet.trainer import (
    AdamState,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    center_crop,
    flat_grads,
    lr_at_epoch,
    split_dataset,
    train,
)


# schedule


@pytest.mark.parametrize("epoch,lr", [(0, 0.01), (39, 0.01), (40, 0.001), (79, 0.001), (80, 1e-4), (359, 1e-10)])
def test_lr_schedule(epoch, lr):
    assert lr_at_epoch(epoch) == pytest.approx(lr, rel=1e-12)


def test_lr_schedule_rejects_negative():
    with pytest.raises(ValueError):
        lr_at_epoch(-1)


def test_config_defaults_and_validation():
    cfg = TrainConfig()
    assert (cfg.epochs, cfg.base_lr, cfg.batch_size, cfg.lr_gamma, cfg.lr_step_epochs, cfg.crop) == (
        360, 0.01, 40, 0.1, 40, 180)
    assert (cfg.beta1, cfg.beta2, cfg.eps) == (0.9, 0.999, 1e-8)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(train_fraction=1.0)


# Adam


def hand_adam(theta, grad_fn, steps, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar Adam written from the update equations, plain Python floats."""
    m = v = 0.0
    trace = []
    for t in range(1, steps + 1):
        g = grad_fn(theta)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1**t)
        vh = v / (1 - b2**t)
        theta = theta - lr * mh / (math.sqrt(vh) + eps)
        trace.append(theta)
    return trace


def test_adam_matches_hand_coded_trace():
    p = np.zeros(1)
    state = AdamState.zeros_like([p])
    ref = hand_adam(0.0, lambda th: 2 * (th - 3), 100, 0.1)
    for k in range(100):
        adam_step([p], [2 * (p - 3)], state, 0.1)
        assert abs(p[0] - ref[k]) <= 1e-10
    assert state.t == 100


def test_adam_first_step_magnitude():
    p = np.array([1.0, -2.0, 0.5])
    state = AdamState.zeros_like([p])
    adam_step([p], [np.ones(3)], state, 0.01)
    assert np.allclose(p - np.array([1.0, -2.0, 0.5]), -0.01, rtol=1e-6)


def test_adam_zero_gradient_keeps_params():
    p = np.array([1.0, 2.0])
    state = AdamState.zeros_like([p])
    adam_step([p], [np.zeros(2)], state, 0.01)
    assert p.tolist() == [1.0, 2.0]


def test_adam_shape_mismatch():
    p = np.zeros(3)
    with pytest.raises(T.StructuralError):
        adam_step([p], [np.zeros(4)], AdamState.zeros_like([p]), 0.01)


def test_tied_update_uses_summed_site_gradients():
    rng = np.random.default_rng(0)
    tied = build_network(seed=3, dtype=np.float64)
    untied = build_network(NetworkConfig(tie_mode="untied"), dtype=np.float64)
    # copy each tied block into every site that references it
    site_block = [0, 1, 2, 2, 2, 1, 0]
    for site, b in enumerate(site_block):
        for ku, kt in zip(untied.stage_params[site].kernels, tied.stage_params[b].kernels):
            for dst, src in zip(ku.arrays(), kt.arrays()):
                dst[...] = src
    x = rng.uniform(size=(1, 3, 16, 16))
    g = rng.uniform(size=(1, 3, 16, 16))

    def grads(net):
        outs, cache = net_forward(x, net, return_cache=True)
        assert total_loss(outs, g, return_grad=False).total == pytest.approx(
            total_loss(net_forward(x, tied), g, return_grad=False).total, rel=1e-12)
        return net_backward(cache, total_loss(outs, g).d_outputs, net)[1]

    gt, gu = grads(tied), grads(untied)
    for b in range(3):
        sites = [s for s, sb in enumerate(site_block) if sb == b]
        for k in range(5):
            for a_t, *a_u in zip(gt[b][k].arrays(), *(gu[s][k].arrays() for s in sites)):
                assert np.allclose(a_t, sum(a_u), rtol=1e-10, atol=1e-14)

    # one Adam step on the tied store equals the step from summed grads, not averaged ones
    params = [a.copy() for a in tied.parameters()]
    adam_step(tied.parameters(), flat_grads(gt), AdamState.zeros_like(params), 0.01)
    summed = [a.copy() for a in params]
    adam_step(summed, flat_grads(gt), AdamState.zeros_like(summed), 0.01)
    assert all(np.array_equal(a, b) for a, b in zip(tied.parameters(), summed))
    # training the untied copies separately and then averaging them is a different update
    u_params = untied.parameters()
    adam_step(u_params, flat_grads(gu), AdamState.zeros_like(u_params), 0.01)
    averaged = []
    for b in range(3):
        sites = [s for s, sb in enumerate(site_block) if sb == b]
        for k in range(5):
            for arrs in zip(*(untied.stage_params[s].kernels[k].arrays() for s in sites)):
                averaged.append(sum(arrs) / len(arrs))
    assert any(not np.allclose(a, b) for a, b in zip(tied.parameters(), averaged))


# data


def test_center_crop_offsets():
    img = np.arange(200 * 300, dtype=np.float64).reshape(1, 1, 200, 300)
    out = center_crop(img, 180)
    assert out.shape == (1, 1, 180, 180)
    assert out[0, 0, 0, 0] == img[0, 0, 10, 60]
    same = np.zeros((1, 3, 180, 180))
    assert np.array_equal(center_crop(same, 180), same)
    odd = np.arange(181 * 181.0).reshape(1, 1, 181, 181)
    assert center_crop(odd, 180)[0, 0, 0, 0] == odd[0, 0, 0, 0]


def test_center_crop_too_small_names_file():
    with pytest.raises(T.StructuralError, match="foo.png"):
        center_crop(np.zeros((1, 3, 100, 200)), 180, "foo.png")


def test_split_ratio_and_partition():
    items = list(range(100))
    tr, te = split_dataset(items, 0)
    assert (len(tr), len(te)) == (90, 10)
    assert sorted(tr + te) == items
    assert not set(tr) & set(te)
    assert split_dataset(items, 0) == (tr, te)
    assert split_dataset(items, 1) != (tr, te)
    assert [len(s) for s in split_dataset(list(range(32)), 0)] == [29, 3]


def test_split_rejects_empty():
    with pytest.raises(T.StructuralError):
        split_dataset([], 0)


# loop


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    synth_pairs(10, 32, 3, root)
    return root


def tiny_cfg(**kw):
    base = dict(epochs=5, batch_size=4, crop=32, lr_step_epochs=2, seed=1, log_timing=False)
    base.update(kw)
    return TrainConfig(**base)


def test_training_is_deterministic(tiny_data, tmp_path):
    train(tiny_data, tiny_cfg(), NetworkConfig(), tmp_path / "a")
    train(tiny_data, tiny_cfg(), NetworkConfig(), tmp_path / "b")
    for name in ("train_log.jsonl", "checkpoint.json", "split.json", "checkpoint_epoch0004.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_log_schema_and_lr_column(tiny_data, tmp_path):
    cfg = tiny_cfg()
    _, rows, (tr, te) = train(tiny_data, cfg, NetworkConfig(), tmp_path)
    lines = (tmp_path / "train_log.jsonl").read_text().splitlines()
    assert len(lines) == 5
    for e, line in enumerate(lines):
        row = json.loads(line)
        assert list(row) == ["epoch", "lr", "rec", "ms_ssim", "grad", "total", "seconds"]
        assert row["epoch"] == e + 1
        assert row["lr"] == lr_at_epoch(e, cfg)
        assert all(math.isfinite(v) for v in row.values())
        assert row["seconds"] == 0.0
    assert (len(tr), len(te)) == (9, 1)
    split = json.loads((tmp_path / "split.json").read_text())
    assert split == {"train": [p.name for p in tr], "test": [p.name for p in te]}
    assert sorted(p.name for p in tmp_path.glob("checkpoint*.json")) == [
        "checkpoint.json", "checkpoint_epoch0002.json", "checkpoint_epoch0004.json"]


def test_training_reduces_loss(tiny_data, tmp_path):
    net, rows, _ = train(tiny_data, tiny_cfg(epochs=6, lr_step_epochs=40), NetworkConfig(), None)
    assert rows[-1]["total"] < rows[0]["total"]
    assert not list(tmp_path.iterdir())


def test_final_checkpoint_matches_returned_net(tiny_data, tmp_path):
    net, _, _ = train(tiny_data, tiny_cfg(epochs=2), NetworkConfig(), tmp_path)
    loaded = load_checkpoint(tmp_path / "checkpoint.json")
    assert all(np.array_equal(a, b) for a, b in zip(net.parameters(), loaded.parameters()))


def test_crop_failure_is_reported(tiny_data):
    with pytest.raises(T.StructuralError, match="smaller than the 64x64 crop"):
        train(tiny_data, tiny_cfg(crop=64), NetworkConfig(), None)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts(tiny_data):
    net = build_network()
    net.stage_params[0].kernels[0].w1[:] = np.inf
    with pytest.raises(TrainingDiverged, match="epoch 1, batch 1"):
        train(tiny_data, tiny_cfg(), NetworkConfig(), None, net=net)
