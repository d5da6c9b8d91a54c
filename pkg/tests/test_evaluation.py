from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from ribcascade.dataio import ALL_LABELS, RibLabel
from ribcascade.errors import ValidationError
from ribcascade.evaluation import (
    REFERENCE_DICE,
    REFERENCE_POOLED,
    MetricsReport,
    RibRecord,
    aggregate,
    evaluate_image,
    label_color,
    pixel_classification_metrics,
    render_overlay,
    render_report,
)
from ribcascade.geometry import box_from_mask
from ribcascade.model import Detection
from ribcascade.phantom import PhantomConfig, generate_phantom
from ribcascade.pipeline import CascadeResult


def oracle_result(item):
    """A cascade result that reproduces the ground truth exactly."""
    dets = [Detection(l, box_from_mask(m), 1.0, np.ones((28, 28))) for l, m in item.annotations.items()]
    return CascadeResult(item.id, dets, dict(item.annotations))


def brute_confusion(pred, gt):
    tp = tn = fp = fn = 0
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        if p and g:
            tp += 1
        elif g:
            fn += 1
        elif p:
            fp += 1
        else:
            tn += 1
    return tp, tn, fp, fn


@pytest.fixture(scope="module")
def phantom():
    return generate_phantom(11, PhantomConfig(size=128))


def test_pixel_metrics_closed_form():
    gt = np.zeros((4, 4), bool)
    gt[:2] = True
    pred = np.zeros((4, 4), bool)
    pred[0] = True
    pred[3, :2] = True
    acc, sens, spec = pixel_classification_metrics(pred, gt)
    assert (acc, sens, spec) == (0.625, 0.5, 0.75)
    assert pixel_classification_metrics(gt, gt) == (1.0, 1.0, 1.0)
    assert pixel_classification_metrics(~gt, gt) == (0.0, 0.0, 0.0)


def test_pixel_metrics_errors():
    with pytest.raises(ValidationError):
        pixel_classification_metrics(np.ones((4, 4)), np.ones((4, 4)))
    with pytest.raises(ValidationError):
        pixel_classification_metrics(np.zeros((4, 4)), np.zeros((4, 4)))
    with pytest.raises(ValidationError):
        pixel_classification_metrics(np.zeros((4, 4)), np.zeros((4, 5)))


def test_pixel_metrics_match_brute_force():
    rng = np.random.default_rng(3)
    for _ in range(500):
        shape = tuple(rng.integers(2, 12, 2))
        gt = rng.random(shape) < rng.uniform(0.1, 0.9)
        gt.flat[0], gt.flat[-1] = True, False
        pred = rng.random(shape) < rng.uniform(0, 1)
        tp, tn, fp, fn = brute_confusion(pred, gt)
        want = ((tp + tn) / gt.size, tp / (tp + fn), tn / (tn + fp))
        assert pixel_classification_metrics(pred, gt) == want


def test_evaluate_oracle_injection_all_ones(phantom):
    ev = evaluate_image(oracle_result(phantom), phantom)
    assert len(ev.records) == 18
    assert all(r.box_dice == 1.0 and r.mask_dice == 1.0 and not r.missed for r in ev.records)
    assert ev.pixel == {"accuracy": 1.0, "sensitivity": 1.0, "specificity": 1.0}
    assert ev.false_detections == []


def test_evaluate_empty_predictions_are_misses(phantom):
    ev = evaluate_image(CascadeResult(phantom.id, [], {}), phantom)
    assert all(r.missed and r.box_dice == 0.0 and r.mask_dice == 0.0 for r in ev.records)
    assert ev.pixel["sensitivity"] == 0.0


def test_evaluate_low_score_is_miss(phantom):
    res = oracle_result(phantom)
    res.detections[0].score = 0.01
    ev = evaluate_image(res, phantom)
    missed = [r for r in ev.records if r.missed]
    assert [r.label for r in missed] == [res.detections[0].label.stem]


def test_evaluate_false_detection_and_id_mismatch(phantom):
    from ribcascade.dataio import AnnotatedImage

    partial = AnnotatedImage(
        phantom.image, {l: m for l, m in phantom.annotations.items() if l.index != 9}, phantom.id
    )
    ev = evaluate_image(oracle_result(phantom), partial)
    assert ev.false_detections == ["left_9", "right_9"]
    assert len(ev.records) == 16
    with pytest.raises(ValidationError):
        evaluate_image(CascadeResult("other", [], {}), phantom)


def test_evaluate_half_overlap_16x16():
    from ribcascade.dataio import AnnotatedImage

    gt_mask = np.zeros((16, 16), bool)
    gt_mask[4:8, 2:10] = True
    pred_mask = np.zeros((16, 16), bool)
    pred_mask[4:8, 6:14] = True
    label = RibLabel("left", 1)
    # below the image size floor, so only the shape is provided
    gt = AnnotatedImage(SimpleNamespace(shape=(16, 16)), {label: gt_mask}, "x")
    res = CascadeResult("x", [Detection(label, box_from_mask(pred_mask), 0.9, None)], {label: pred_mask})
    ev = evaluate_image(res, gt)
    inter = int((gt_mask & pred_mask).sum())
    want = 2 * inter / (gt_mask.sum() + pred_mask.sum())
    assert ev.records[0].mask_dice == want == 0.5
    assert ev.records[0].box_dice == 0.5
    tp, tn, fp, fn = brute_confusion(pred_mask, gt_mask)
    assert ev.pixel["accuracy"] == (tp + tn) / 256


def _records(values, side="left"):
    return [RibRecord("a", f"{side}_1", v, v, 1.0, False) for v in values]


def test_aggregate_closed_forms():
    r = aggregate(_records([0.8]))
    assert r.cells["left/detection"] == {"mean": 0.8, "std": 0.0, "n": 1}
    r = aggregate(_records([0.6, 1.0]))
    assert r.cells["left/detection"]["mean"] == pytest.approx(0.8, abs=1e-12)
    assert r.cells["left/detection"]["std"] == pytest.approx(0.2, abs=1e-12)
    r = aggregate(_records([0.6, 1.0]), sample_std=True)
    assert r.cells["left/detection"]["std"] == pytest.approx(0.2 * np.sqrt(2), abs=1e-12)
    with pytest.raises(ValidationError):
        aggregate([])


def test_pooled_row_average_reproduces_reference():
    for task in ("detection", "segmentation"):
        row_avg = (REFERENCE_DICE[("left", task)][0] + REFERENCE_DICE[("right", task)][0]) / 2
        # agrees to three decimals under half-up rounding (0.8455 -> 0.846)
        assert abs(row_avg - REFERENCE_POOLED[task]) <= 0.0005 + 1e-12


def test_pooled_row_average_vs_instance():
    r = aggregate(_records([0.6, 0.8, 1.0]) + _records([0.2], "right"))
    assert r.pooled["detection"] == pytest.approx((0.8 + 0.2) / 2)
    assert r.pooled_instance["detection"] == pytest.approx(0.65)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.lists(st.floats(0, 1), min_size=1, max_size=30))
def test_aggregate_bounds(left, right):
    r = aggregate(_records(left) + _records(right, "right"))
    for side, vals in (("left", left), ("right", right)):
        c = r.cells[f"{side}/detection"]
        assert min(vals) - 1e-12 <= c["mean"] <= max(vals) + 1e-12
        assert 0.0 <= c["std"] <= 0.5 + 1e-12
        assert c["n"] == len(vals)


def test_report_roundtrip_and_render(tmp_path, phantom):
    ev = evaluate_image(oracle_result(phantom), phantom)
    r = aggregate([ev])
    r.save(tmp_path / "m.json")
    back = MetricsReport.load(tmp_path / "m.json")
    assert back == r
    text = render_report(r)
    for row in ("| Left |", "| Right |", "| Pooled |"):
        assert text.count(row) == 2  # phantom table + reference table
    assert "| | Detection | Segmentation |" in text
    assert "1.000 ± 0.000" in text
    assert "0.841 ± 0.126" in text


def test_label_colors_distinct():
    colors = {label_color(l) for l in ALL_LABELS}
    assert len(colors) == 18


def test_render_empty_equals_grayscale(tmp_path, phantom):
    log = render_overlay(phantom.image, [], tmp_path / "o.png")
    assert log == []
    got = np.array(Image.open(tmp_path / "o.png"))
    gray = np.round(np.clip(phantom.image.pixels, 0, 1) * 255).astype(np.uint8)
    np.testing.assert_array_equal(got, np.repeat(gray[:, :, None], 3, axis=2))


def test_render_gt_labels_and_determinism(tmp_path, phantom):
    log = render_overlay(phantom.image, phantom, tmp_path / "a.png")
    texts = {entry[1] for entry in log if entry[0] == "text"}
    assert texts == {l.short for l in ALL_LABELS}
    assert sum(e[0] == "mask" for e in log) == 18 and sum(e[0] == "box" for e in log) == 18
    render_overlay(phantom.image, phantom, tmp_path / "b.png")
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()


def test_render_unwritable_path(tmp_path, phantom):
    with pytest.raises(ValidationError):
        render_overlay(phantom.image, phantom, tmp_path / "missing" / "x.png")
