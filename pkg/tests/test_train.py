"""Loss, Adam, training pairs, the training loop, and the ca_pad pipeline."""

import numpy as np
import pytest

from capad.imagery import band_slices
from capad.net import NetConfig, net_init
from capad.padding import pad_index_mapped
from capad.train import (
    AdamState,
    PadModel,
    TrainConfig,
    adam_step,
    ca_pad,
    canonical_side,
    load_bundle,
    make_training_pair,
    reconstruction_loss,
    save_bundle,
    train_direction,
)


def zero_model(p=2, m=6, base=4, two_model=False):
    cfg = NetConfig(depth=1, base_channels=base, in_channels=3, seed=0)
    nets = {side: net_init(cfg) for side in ("left", "right", "top", "bottom")}
    if two_model:
        return PadModel(left=nets["left"], right=None, top=nets["top"], bottom=None,
                        p=p, m=m, two_model_mode=True)
    return PadModel(**nets, p=p, m=m)


# ---------------------------------------------------------------------------
# reconstruction loss


def test_loss_zero_when_band_matches():
    b = np.random.default_rng(0).random((3, 4, 6))
    mask = np.ones((4, 6), dtype=np.uint8)
    mask[:, :2] = 0
    loss, grad = reconstruction_loss(b, mask, b.copy(), "l1")
    assert loss == 0.0
    np.testing.assert_array_equal(grad, 0.0)


def test_loss_unit_example():
    # 4 supervised pixels, truth 1, prediction 0, L1 -> exactly 1.0
    truth = np.ones((1, 2, 4))
    pred = np.zeros((1, 2, 4))
    mask = np.ones((2, 4), dtype=np.uint8)
    mask[:, :2] = 0
    pred[:, :, 2:] = truth[:, :, 2:]  # unsupervised region agrees
    loss, _ = reconstruction_loss(truth, mask, pred, "l1")
    assert loss == pytest.approx(1.0)


def test_loss_hand_value():
    # band truth [0.2, 0.8] vs prediction [0.5, 0.5]: (0.3 + 0.3)/2
    truth = np.array([[[0.2, 0.9], [0.8, 0.9]]])
    pred = np.array([[[0.5, 0.9], [0.5, 0.9]]])
    mask = np.array([[0, 1], [0, 1]], dtype=np.uint8)
    loss, _ = reconstruction_loss(truth, mask, pred, "l1")
    assert loss == pytest.approx(0.3)


def test_loss_l2():
    truth = np.array([[[0.0, 1.0]]])
    pred = np.array([[[0.5, 1.0]]])
    mask = np.array([[0, 1]], dtype=np.uint8)
    loss, grad = reconstruction_loss(truth, mask, pred, "l2")
    assert loss == pytest.approx(0.25)
    assert grad[0, 0, 0] == pytest.approx(1.0)  # 2 * 0.5 / 1


def test_loss_gradient_is_masked():
    rng = np.random.default_rng(1)
    truth = rng.random((2, 3, 5))
    pred = rng.random((2, 3, 5))
    mask = np.ones((3, 5), dtype=np.uint8)
    mask[1, 2] = 0
    _, grad = reconstruction_loss(truth, mask, pred, "l1")
    live = grad != 0
    assert live[:, 1, 2].all()
    assert live.sum() == 2


def test_loss_batch_mean():
    truth = np.zeros((2, 1, 1, 2))
    pred = np.zeros((2, 1, 1, 2))
    pred[0, 0, 0, 0] = 1.0  # only one sample is wrong
    mask = np.array([[0, 1]], dtype=np.uint8)
    loss, _ = reconstruction_loss(truth, mask, pred, "l1")
    assert loss == pytest.approx(0.5)


def test_loss_matches_finite_differences():
    rng = np.random.default_rng(2)
    truth = rng.random((1, 3, 4))
    pred = rng.random((1, 3, 4)) + 0.05  # keep |diff| away from the L1 kink at 0
    mask = np.zeros((3, 4), dtype=np.uint8)
    for norm in ("l1", "l2"):
        loss, grad = reconstruction_loss(truth, mask, pred, norm)
        eps = 1e-7
        for idx in [(0, 0, 0), (0, 2, 3), (0, 1, 2)]:
            p_plus = pred.copy(); p_plus[idx] += eps
            p_minus = pred.copy(); p_minus[idx] -= eps
            fd = (reconstruction_loss(truth, mask, p_plus, norm)[0]
                  - reconstruction_loss(truth, mask, p_minus, norm)[0]) / (2 * eps)
            assert fd == pytest.approx(grad[idx], rel=1e-5, abs=1e-9)


def test_loss_requires_supervised_pixels():
    with pytest.raises(ValueError):
        reconstruction_loss(np.zeros((1, 2, 2)), np.ones((2, 2), dtype=np.uint8),
                            np.zeros((1, 2, 2)))


# ---------------------------------------------------------------------------
# Adam


def test_adam_zero_grad_keeps_params():
    params = {"w": np.array([1.0, -2.0])}
    state = AdamState.for_params(params)
    adam_step(params, {"w": np.zeros(2)}, state, TrainConfig())
    np.testing.assert_array_equal(params["w"], [1.0, -2.0])
    assert state.step == 1


def test_adam_first_step_reference_value():
    # scalar 1.0, grad 4.0, lr 1e-4: bias-corrected ratio is ~1, so p -> 0.9999
    params = {"w": np.array([1.0])}
    state = AdamState.for_params(params)
    adam_step(params, {"w": np.array([4.0])}, state, TrainConfig(lr=1e-4))
    assert params["w"][0] == pytest.approx(0.9999, abs=1e-7)


def test_adam_deterministic_trajectory():
    def run():
        rng = np.random.default_rng(3)
        params = {"w": np.ones(4)}
        state = AdamState.for_params(params)
        cfg = TrainConfig(lr=1e-2)
        for _ in range(10):
            adam_step(params, {"w": rng.standard_normal(4)}, state, cfg)
        return params["w"]

    np.testing.assert_array_equal(run(), run())


def test_adam_rejects_nonfinite_grad():
    params = {"w": np.array([1.0])}
    state = AdamState.for_params(params)
    with pytest.raises(FloatingPointError, match="w"):
        adam_step(params, {"w": np.array([np.nan])}, state, TrainConfig())


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0).validate()
    with pytest.raises(ValueError):
        TrainConfig(beta1=1.0).validate()
    with pytest.raises(ValueError):
        TrainConfig(loss_norm="huber").validate()


# ---------------------------------------------------------------------------
# training pairs


@pytest.mark.parametrize("side", ["left", "right", "top", "bottom"])
def test_pair_masked_agreement(side):
    rng = np.random.default_rng(4)
    img = rng.random((3, 12, 12))
    inp, tgt, mask = make_training_pair(img, side, p=2, m=5, rng=rng)
    np.testing.assert_array_equal(inp.tensor * mask, tgt.tensor * mask)


def test_pair_mask_zero_count():
    rng = np.random.default_rng(5)
    img = rng.random((3, 10, 14))
    _, _, mask = make_training_pair(img, "left", p=3, m=4, rng=rng)
    assert (mask == 0).sum() == 3 * 10


def test_pair_band_is_zero_on_input():
    rng = np.random.default_rng(6)
    img = rng.random((3, 9, 9)) + 0.1  # strictly positive content
    inp, _, _ = make_training_pair(img, "top", p=2, m=4, rng=rng)
    rs, cs = band_slices("top", 2)
    np.testing.assert_array_equal(inp.tensor[:, rs, cs], 0.0)
    assert inp.tensor[:, 2:, :].min() > 0.0


def test_pair_target_continues_ramp():
    # ramp along x: the hidden band of a left strip holds the ramp continuation
    w = 16
    ramp = np.tile(np.linspace(0.0, 1.0, w)[None, None, :], (1, 4, 1))
    rng = np.random.default_rng(7)
    inp, tgt, _ = make_training_pair(ramp, "left", p=2, m=5, rng=rng,
                                     border_only=True)
    np.testing.assert_allclose(tgt.tensor[0, 0, :2], ramp[0, 0, :2])
    np.testing.assert_array_equal(inp.tensor[0, 0, :2], 0.0)


def test_pair_border_only_pins_offset():
    rng = np.random.default_rng(8)
    img = rng.random((1, 8, 20))
    inp, tgt, _ = make_training_pair(img, "right", p=1, m=4, rng=rng,
                                     border_only=True)
    np.testing.assert_array_equal(tgt.tensor[:, :, :4], img[:, :, -5:-1])


def test_pair_rejects_small_image():
    with pytest.raises(ValueError):
        make_training_pair(np.zeros((1, 4, 4)), "left", p=2, m=3,
                           rng=np.random.default_rng(0))


# ---------------------------------------------------------------------------
# training loop


def tiny_corpus(n=4, size=16, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.random((3, size, size)) for _ in range(n)]


def test_train_deterministic():
    corpus = tiny_corpus()
    cfg = TrainConfig(epochs=2, batch_size=2, seed=5)
    net_cfg = NetConfig(depth=1, base_channels=4, seed=1)
    net_a, hist_a = train_direction(corpus, "left", cfg, net_cfg, p=2, m=6)
    net_b, hist_b = train_direction(corpus, "left", cfg, net_cfg, p=2, m=6)
    assert hist_a == hist_b
    for (_, a), (_, b) in zip(net_a.named_params(), net_b.named_params()):
        np.testing.assert_array_equal(a, b)


def test_train_history_length():
    _, hist = train_direction(tiny_corpus(2), "top",
                              TrainConfig(epochs=3, batch_size=2),
                              NetConfig(depth=1, base_channels=4), p=1, m=5)
    assert len(hist) == 3


def test_train_corpus_permutation_invariant_without_shuffle():
    # one full batch + no per-sample randomness: sample order cannot matter
    corpus = tiny_corpus(4)
    cfg = TrainConfig(epochs=2, batch_size=4, seed=0, shuffle=False,
                      border_only=True)
    net_cfg = NetConfig(depth=1, base_channels=4, seed=2)
    _, hist_a = train_direction(corpus, "left", cfg, net_cfg, p=2, m=6)
    _, hist_b = train_direction(corpus[::-1], "left", cfg, net_cfg, p=2, m=6)
    np.testing.assert_allclose(hist_a, hist_b, rtol=1e-12)


def test_train_rejects_empty_corpus():
    with pytest.raises(ValueError):
        train_direction([], "left", TrainConfig(epochs=1),
                        NetConfig(depth=1, base_channels=4), p=1, m=4)


def test_train_loss_decreases_quickly():
    # smooth corpus, a few epochs: loss should at least not blow up and end lower
    rng = np.random.default_rng(9)
    base = rng.random((3, 1, 1))
    corpus = [np.tile(base + 0.1 * i, (1, 16, 16)).clip(0, 1) for i in range(4)]
    cfg = TrainConfig(lr=1e-3, epochs=8, batch_size=4, seed=1, border_only=True)
    _, hist = train_direction(corpus, "left", cfg,
                              NetConfig(depth=1, base_channels=4, seed=0), p=2, m=6)
    assert hist[-1] <= hist[0]


# ---------------------------------------------------------------------------
# ca_pad pipeline


def test_untrained_ca_pad_equals_replicate():
    rng = np.random.default_rng(10)
    img = rng.random((3, 12, 12))
    model = zero_model(p=2, m=6)
    out = ca_pad(img, model)
    assert np.array_equal(out, pad_index_mapped(img, "replicate", 2))


def test_untrained_ca_pad_equals_replicate_p1():
    rng = np.random.default_rng(11)
    img = rng.random((3, 10, 14))
    model = zero_model(p=3, m=5)
    out = ca_pad(img, model, p=1)
    assert np.array_equal(out, pad_index_mapped(img, "replicate", 1))


def test_ca_pad_constant_image():
    img = np.full((3, 10, 10), 0.42)
    out = ca_pad(img, zero_model(p=2, m=5))
    np.testing.assert_array_equal(out, 0.42)


def test_ca_pad_interior_bitwise():
    rng = np.random.default_rng(12)
    img = rng.random((3, 11, 13))
    model = zero_model(p=2, m=6)
    # give the nets arbitrary nonzero heads: the interior must still be verbatim
    for side in ("left", "right", "top", "bottom"):
        net = model.net_for(side)
        net.head.weight = rng.standard_normal(net.head.weight.shape) * 0.3
    out = ca_pad(img, model)
    assert np.array_equal(out[:, 2:13, 2:15], img)


def test_ca_pad_shape():
    img = np.random.default_rng(13).random((3, 9, 17))
    out = ca_pad(img, zero_model(p=2, m=6), p=2)
    assert out.shape == (3, 13, 21)


def test_ca_pad_rejects_oversized_p():
    with pytest.raises(ValueError):
        ca_pad(np.zeros((3, 12, 12)), zero_model(p=2, m=6), p=3)


def test_ca_pad_rejects_small_image():
    with pytest.raises(ValueError):
        ca_pad(np.zeros((3, 6, 6)), zero_model(p=2, m=6))


def test_two_model_mode_aliases_left_top():
    model = zero_model(two_model=True)
    assert model.right is model.left
    assert model.bottom is model.top


def test_four_vs_two_model_identical_with_copied_weights():
    rng = np.random.default_rng(14)
    cfg = NetConfig(depth=1, base_channels=4, in_channels=3, seed=6)
    left, top = net_init(cfg), net_init(cfg)
    for net in (left, top):
        net.head.weight = rng.standard_normal(net.head.weight.shape) * 0.2
        net.head.bias = rng.standard_normal(2) * 0.1
    four = PadModel(left=left, right=left.copy(), top=top, bottom=top.copy(),
                    p=2, m=6)
    two = PadModel(left=left, right=None, top=top, bottom=None, p=2, m=6,
                   two_model_mode=True)
    img = rng.random((3, 12, 12))
    assert np.array_equal(ca_pad(img, four), ca_pad(img, two))


def test_pad_model_requires_right_bottom():
    cfg = NetConfig(depth=1, base_channels=4)
    with pytest.raises(ValueError):
        PadModel(left=net_init(cfg), right=None, top=net_init(cfg), bottom=None,
                 p=1, m=4)


def test_pad_model_rejects_mixed_configs():
    a = net_init(NetConfig(depth=1, base_channels=4))
    b = net_init(NetConfig(depth=1, base_channels=8))
    with pytest.raises(ValueError):
        PadModel(left=a, right=a.copy(), top=b, bottom=b.copy(), p=1, m=4)


def test_canonical_side_map():
    assert canonical_side("right") == "left"
    assert canonical_side("bottom") == "top"
    assert canonical_side("left") == "left"


# ---------------------------------------------------------------------------
# bundles


def test_bundle_roundtrip(tmp_path):
    rng = np.random.default_rng(15)
    model = zero_model(p=2, m=6)
    for side in ("left", "right", "top", "bottom"):
        net = model.net_for(side)
        net.head.weight = rng.standard_normal(net.head.weight.shape).astype(np.float32).astype(np.float64)
        # CAPM stores float32; snap every weight so the round trip is exact
        for _, arr in net.named_params():
            arr[...] = arr.astype(np.float32)
    save_bundle(model, tmp_path / "bundle")
    back = load_bundle(tmp_path / "bundle")
    assert back.p == 2 and back.m == 6 and not back.two_model_mode
    img = rng.random((3, 12, 12))
    np.testing.assert_array_equal(ca_pad(img, model), ca_pad(img, back))


def test_bundle_two_model_roundtrip(tmp_path):
    model = zero_model(p=1, m=5, two_model=True)
    save_bundle(model, tmp_path / "b2")
    back = load_bundle(tmp_path / "b2")
    assert back.two_model_mode
    assert back.right is back.left


def test_bundle_manifest_contents(tmp_path):
    save_bundle(zero_model(p=2, m=6), tmp_path / "b3")
    text = (tmp_path / "b3" / "manifest.txt").read_text()
    assert "p=2" in text and "m=6" in text and "two_model_mode=false" in text
    assert "depth=1" in text and "base_channels=4" in text


def test_bundle_missing_manifest(tmp_path):
    with pytest.raises((OSError, ValueError)):
        load_bundle(tmp_path / "nothing")
