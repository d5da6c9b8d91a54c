import math

import numpy as np
import pytest
import torch

from ribcascade.dataio import GrayImage, RibLabel
from ribcascade.errors import ValidationError
from ribcascade.geometry import NormalizedBox, PixelBox, denormalize_box
from ribcascade.model import (
    RibNetwork,
    anchors_tensor,
    build_input,
    decode_shift,
    encode_shift,
    encode_shift_tensor,
    forward,
    load_checkpoint,
    loss,
    make_targets,
    save_checkpoint,
)
from ribcascade.phantom import PhantomConfig, generate_phantom

from .conftest import grid_anchors


def random_box(rng):
    w, h = rng.uniform(0.05, 0.9, 2)
    x0 = rng.uniform(0, 1 - w)
    y0 = rng.uniform(0, 1 - h)
    return NormalizedBox(x0, y0, x0 + w, y0 + h)


def test_build_input_channels():
    img = GrayImage(np.random.default_rng(0).random((70, 80)))
    x = build_input(img)
    assert x.shape == (3, 70, 80) and x.dtype == np.float32
    np.testing.assert_array_equal(x[0], img.pixels.astype(np.float32))
    np.testing.assert_array_equal(x[1], img.pixels.astype(np.float32))
    assert not x[2].any()
    x = build_input(img, np.ones((70, 80), bool))
    assert (x[2] == 1).all()
    with pytest.raises(ValidationError):
        build_input(img, np.ones((70, 81)))


def test_decode_closed_forms():
    anchor = NormalizedBox(0.2, 0.3, 0.4, 0.5)
    shape = (200, 100)
    zero = decode_shift(anchor, (0, 0, 0, 0), shape)
    assert zero.as_tuple() == pytest.approx(denormalize_box(anchor, 100, 200).as_tuple(), abs=1e-9)
    wide = decode_shift(anchor, (0, 0, math.log(2), 0), shape)
    assert wide.width == pytest.approx(2 * zero.width, abs=1e-9)
    assert (wide.x_min + wide.x_max) / 2 == pytest.approx((zero.x_min + zero.x_max) / 2, abs=1e-9)
    right = decode_shift(anchor, (1, 0, 0, 0), shape)
    assert right.x_min - zero.x_min == pytest.approx(zero.width, abs=1e-9)
    assert right.y_min == pytest.approx(zero.y_min, abs=1e-9)


def test_decode_clamps_and_clips():
    anchor = NormalizedBox(0.4, 0.4, 0.6, 0.6)
    box = decode_shift(anchor, (0, 0, 50.0, -50.0), (100, 100))
    assert box.x_min == 0.0 and box.x_max == 100.0
    assert box.height == pytest.approx(20 * math.exp(-4.0))
    with pytest.raises(ValidationError):
        decode_shift(anchor, (float("nan"), 0, 0, 0), (100, 100))


def test_encode_closed_forms():
    anchor = NormalizedBox(0.2, 0.3, 0.4, 0.5)
    assert encode_shift(anchor, anchor) == (0.0, 0.0, 0.0, 0.0)
    doubled = NormalizedBox(0.1, 0.3, 0.5, 0.5)
    dx, dy, dw, dh = encode_shift(anchor, doubled)
    assert dw == pytest.approx(math.log(2), abs=1e-12)
    assert dx == pytest.approx(0, abs=1e-12) and dh == pytest.approx(0, abs=1e-12)


def test_codec_roundtrip():
    rng = np.random.default_rng(0)
    shape = (300, 240)
    worst = 0.0
    for _ in range(1000):
        a, t = random_box(rng), random_box(rng)
        got = decode_shift(a, encode_shift(a, t), shape)
        want = denormalize_box(t, shape[1], shape[0])
        worst = max(worst, np.abs(np.subtract(got.as_tuple(), want.as_tuple())).max() / max(shape))
    assert worst < 1e-6


def test_encode_tensor_matches_scalar():
    rng = np.random.default_rng(1)
    pairs = [(random_box(rng), random_box(rng)) for _ in range(20)]
    a = torch.tensor([p[0].as_tuple() for p in pairs], dtype=torch.float64)
    t = torch.tensor([p[1].as_tuple() for p in pairs], dtype=torch.float64)
    got = encode_shift_tensor(a, t).numpy()
    want = np.array([encode_shift(*p) for p in pairs])
    np.testing.assert_allclose(got, want, atol=1e-12)


@pytest.fixture(scope="module")
def small_phantom():
    return generate_phantom(4, PhantomConfig(size=96))


def test_forward_cardinality_and_ranges(small_phantom):
    anchors = grid_anchors()
    torch.manual_seed(0)
    net = RibNetwork(3)
    rng = np.random.default_rng(0)
    for trial in range(5):
        img = GrayImage(rng.random((96, 112)))
        upper = rng.random((96, 112)) < 0.1 if trial % 2 else None
        dets = forward(net, build_input(img, upper), anchors)
        assert [d.label for d in dets] == [RibLabel("left", 3), RibLabel("right", 3)]
        for d in dets:
            assert 0.0 <= d.score <= 1.0
            assert d.soft_mask.shape == (28, 28)
            assert d.soft_mask.min() >= 0.0 and d.soft_mask.max() <= 1.0
            assert 0 <= d.box.x_min < d.box.x_max <= 112 and 0 <= d.box.y_min < d.box.y_max <= 96


def test_forward_zero_heads_gives_anchor_boxes(small_phantom):
    anchors = grid_anchors()
    net = RibNetwork(2)
    net.zero_heads()
    dets = forward(net, build_input(small_phantom.image), anchors)
    for d in dets:
        want = decode_shift(anchors.boxes[d.anchor_index], (0, 0, 0, 0), (96, 96))
        assert d.box.as_tuple() == pytest.approx(want.as_tuple(), abs=1e-5)
        assert d.score == pytest.approx(0.5)
        np.testing.assert_allclose(d.soft_mask, 0.5)


def test_forward_deterministic(small_phantom):
    anchors = grid_anchors()
    torch.manual_seed(1)
    net = RibNetwork(6)
    stack = build_input(small_phantom.image)
    a = forward(net, stack, anchors)
    b = forward(net, stack, anchors)
    for x, y in zip(a, b):
        assert x.box == y.box and x.score == y.score
        np.testing.assert_array_equal(x.soft_mask, y.soft_mask)


def test_network_rejects_bad_input(anchors):
    net = RibNetwork(1)
    with pytest.raises(ValidationError):
        net(torch.zeros(1, 2, 64, 64), anchors_tensor(anchors))
    with pytest.raises(ValidationError):
        RibNetwork(10)


def _targets(item, rib, anchors, jitter=0.0):
    masks = {l.side: m for l, m in item.annotations.items() if l.index == rib}
    return make_targets(masks, item.image.shape, anchors, 28, jitter, np.random.default_rng(0))


def test_loss_oracle_minimum(small_phantom, anchors):
    t = _targets(small_phantom, 4, anchors)
    shift = torch.zeros(1, 30, 4, dtype=torch.float64)
    logits = torch.full((1, 30, 2), -40.0, dtype=torch.float64)
    for s in range(2):
        shift[0, t.positive[s]] = t.shift[s]
        logits[0, t.positive[s], s] = 40.0
    mask_logits = (t.mask.double() * 80.0 - 40.0)[None]
    total, comp = loss({"shift": shift, "score_logits": logits, "mask_logits": mask_logits}, [t])
    assert float(total) < 1e-3
    assert all(float(v) >= 0 for v in comp.values())


def test_mask_loss_uniform_half_is_ln2(small_phantom, anchors):
    t = _targets(small_phantom, 2, anchors)
    out = {
        "shift": torch.zeros(1, 30, 4),
        "score_logits": torch.zeros(1, 30, 2),
        "mask_logits": torch.zeros(1, 2, 28, 28),
    }
    _, comp = loss(out, [t])
    assert float(comp["mask"]) == pytest.approx(math.log(2), rel=1e-6)
    assert float(comp["score"]) == pytest.approx(math.log(2), rel=1e-6)


def test_loss_nonnegative_random(small_phantom, anchors):
    g = torch.Generator().manual_seed(0)
    targets = [_targets(small_phantom, rib, anchors) for rib in range(1, 10)]
    for trial in range(100):
        t = targets[trial % 9]
        out = {
            "shift": torch.randn(1, 30, 4, generator=g) * 3,
            "score_logits": torch.randn(1, 30, 2, generator=g) * 5,
            "mask_logits": torch.randn(1, 2, 28, 28, generator=g) * 5,
        }
        total, comp = loss(out, [t])
        assert float(total) >= 0
        assert all(float(v) >= 0 for v in comp.values())


def test_loss_missing_side_only_scores(small_phantom, anchors):
    masks = {"left": small_phantom.annotations[RibLabel("left", 5)]}
    t = make_targets(masks, small_phantom.image.shape, anchors)
    assert t.present.tolist() == [True, False]
    out = {
        "shift": torch.zeros(1, 30, 4),
        "score_logits": torch.zeros(1, 30, 2),
        "mask_logits": torch.zeros(1, 2, 28, 28),
    }
    _, comp = loss(out, [t])
    assert float(comp["mask"]) == pytest.approx(math.log(2), rel=1e-6)


def test_positive_anchor_has_best_box_dice(small_phantom, anchors):
    from ribcascade.geometry import box_from_mask, dice_box

    t = _targets(small_phantom, 6, anchors)
    for s, side in enumerate(("left", "right")):
        gt = box_from_mask(small_phantom.annotations[RibLabel(side, 6)])
        dices = [dice_box(gt, denormalize_box(a, 96, 96)) for a in anchors.boxes]
        assert int(t.positive[s]) == int(np.argmax(dices))


def gradient_check(net, x, anchors, targets, n_params=10, eps=1e-6, seed=0):
    """Relative errors between autograd and central differences on sampled parameters."""
    at = anchors_tensor(anchors, torch.float64)
    boxes = torch.stack([t.mask_boxes for t in targets])
    params = [p for p in net.parameters()]
    net.zero_grad()
    total, _ = loss(net(x, at, boxes), targets)
    total.backward()
    rng = np.random.default_rng(seed)
    errors = []
    while len(errors) < n_params:
        p = params[rng.integers(len(params))]
        idx = tuple(int(rng.integers(d)) for d in p.shape)
        analytic = float(p.grad[idx])
        with torch.no_grad():
            orig = float(p[idx])
            p[idx] = orig + eps
            plus = float(loss(net(x, at, boxes), targets)[0])
            p[idx] = orig - eps
            minus = float(loss(net(x, at, boxes), targets)[0])
            p[idx] = orig
        numeric = (plus - minus) / (2 * eps)
        scale = max(abs(analytic), abs(numeric))
        if scale < 1e-8:
            continue  # parameter outside the active path of this input
        errors.append(abs(analytic - numeric) / scale)
    return errors


def test_gradient_check_tiny_backbone(small_phantom, anchors):
    torch.manual_seed(0)
    net = RibNetwork(5).double()
    x = torch.from_numpy(build_input(small_phantom.image, small_phantom.annotations[RibLabel("left", 4)])).double()[None]
    t = _targets(small_phantom, 5, anchors)
    errors = gradient_check(net, x, anchors, [t])
    assert max(errors) < 1e-3, errors


def test_checkpoint_roundtrip(tmp_path, small_phantom, anchors):
    torch.manual_seed(0)
    net = RibNetwork(7)
    save_checkpoint(net, tmp_path, {"anchor_file_hash": anchors.content_hash()})
    back, meta = load_checkpoint(tmp_path, 7)
    assert meta["rib_index"] == 7 and meta["backbone"] == "tiny"
    assert meta["anchor_file_hash"] == anchors.content_hash()
    stack = build_input(small_phantom.image)
    for a, b in zip(forward(net, stack, anchors), forward(back, stack, anchors)):
        assert a.box == b.box
    with pytest.raises(ValidationError):
        load_checkpoint(tmp_path, 8)


def test_resnet50_backbone_builds(anchors):
    net = RibNetwork(1, backbone="resnet50")
    out = net(torch.zeros(1, 3, 64, 64), anchors_tensor(anchors))
    assert out["shift"].shape == (1, 30, 4) and out["score_logits"].shape == (1, 30, 2)
