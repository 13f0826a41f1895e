import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from samdetr.data import (
    BACKGROUND,
    generate_scene,
    make_split,
    mask_box,
    rasterize_disk,
    rasterize_rectangle,
    rasterize_triangle,
    scene_seed,
)
from samdetr.geometry import box_xyxy_to_cxcywh, pairwise_iou
from samdetr.metrics import Detections, evaluate_ap50, interpolated_ap


def test_same_seed_same_scene():
    a, b = generate_scene(123), generate_scene(123)
    assert np.array_equal(a.image, b.image)
    assert np.array_equal(a.boxes, b.boxes) and np.array_equal(a.labels, b.labels)
    c = generate_scene(124)
    assert not np.array_equal(a.image, c.image)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**62))
def test_scene_invariants(seed):
    s = generate_scene(seed)
    assert s.image.shape == (3, 64, 64)
    assert s.image.min() >= 0 and s.image.max() <= 1
    k = s.boxes.shape[0]
    assert 1 <= k <= 4 and s.labels.shape == (k,)
    assert np.all((s.labels >= 0) & (s.labels < 3))
    lo = s.boxes[:, :2] - s.boxes[:, 2:] / 2
    hi = s.boxes[:, :2] + s.boxes[:, 2:] / 2
    assert np.all(s.boxes[:, 2:] > 0) and np.all(lo >= -1e-12) and np.all(hi <= 1 + 1e-12)
    iou = pairwise_iou(s.boxes, s.boxes)[0]
    np.fill_diagonal(iou, 0)
    assert np.all(iou <= 0.3)


def test_scene_boxes_are_tight_around_colored_pixels():
    s = generate_scene(7)
    for box in s.boxes:
        x1, y1 = np.round((box[:2] - box[2:] / 2) * 64).astype(int)
        x2, y2 = np.round((box[:2] + box[2:] / 2) * 64).astype(int)
        patch = s.image[:, y1:y2, x1:x2]
        # some pixel on each edge row/column of the box differs from the background
        diff = np.abs(patch - BACKGROUND).max(axis=0) > 0.15
        assert diff[0].any() and diff[-1].any() and diff[:, 0].any() and diff[:, -1].any()


@settings(max_examples=100, deadline=None)
@given(st.floats(12, 52), st.floats(12, 52), st.floats(3, 11))
def test_disk_box_within_one_pixel(cx, cy, r):
    box = box_xyxy_to_cxcywh(mask_box(rasterize_disk(64, cx, cy, r))) * 64
    np.testing.assert_allclose(box, [cx, cy, 2 * r, 2 * r], atol=1.0)


def test_rectangle_raster_is_exact_for_integer_corners():
    m = rasterize_rectangle(16, 2, 3, 9, 7)
    assert m.sum() == 7 * 4
    np.testing.assert_array_equal(mask_box(m), np.array([2, 3, 9, 7]) / 16)


def test_triangle_raster_is_inside_its_bounds():
    m = rasterize_triangle(32, np.array([[4.0, 28.0], [28.0, 28.0], [10.0, 4.0]]))
    x1, y1, x2, y2 = mask_box(m) * 32
    assert 3 <= x1 and x2 <= 29 and 3 <= y1 and y2 <= 29
    assert 0.3 < m.sum() / (0.5 * 24 * 24) < 1.2


def test_splits_use_distinct_streams():
    assert scene_seed(0, 0, 0) != scene_seed(0, 1, 0) != scene_seed(1, 0, 0)
    train = make_split(0, 0, 3)
    again = make_split(0, 0, 3)
    assert all(np.array_equal(a.image, b.image) for a, b in zip(train, again))


def test_bad_class_count():
    with pytest.raises(ValueError):
        generate_scene(0, n_classes=5)


# -- AP50 ---------------------------------------------------------------------------------


def perfect(scenes):
    return [Detections(s.boxes, np.ones(len(s.labels)), s.labels) for s in scenes]


def test_perfect_predictions():
    scenes = [generate_scene(i) for i in range(5)]
    assert evaluate_ap50(perfect(scenes), [(s.boxes, s.labels) for s in scenes]) == 1.0


def test_no_predictions():
    scenes = [generate_scene(i) for i in range(3)]
    empty = [Detections(np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=int)) for _ in scenes]
    assert evaluate_ap50(empty, [(s.boxes, s.labels) for s in scenes]) == 0.0


def test_one_of_two_matched():
    gt = (np.array([[0.3, 0.3, 0.2, 0.2], [0.7, 0.7, 0.2, 0.2]]), np.array([0, 0]))
    pred = Detections(np.array([[0.3, 0.3, 0.2, 0.2]]), np.array([0.9]), np.array([0]))
    assert evaluate_ap50([pred], [gt]) == pytest.approx(0.5, abs=1e-15)


def test_hand_pr_curve():
    # ranked: TP, FP, TP over 2 GT -> precision envelope 1 up to r=0.5, 2/3 up to r=1
    tp = np.array([1.0, 0.0, 1.0])
    assert interpolated_ap(tp, 2) == pytest.approx(0.5 * 1 + 0.5 * 2 / 3, abs=1e-15)


def test_duplicate_detection_is_false_positive():
    gt = (np.array([[0.5, 0.5, 0.4, 0.4]]), np.array([1]))
    pred = Detections(np.array([[0.5, 0.5, 0.4, 0.4]] * 2), np.array([0.9, 0.8]), np.array([1, 1]))
    assert evaluate_ap50([pred], [gt]) == 1.0
    pred = Detections(pred.boxes, np.array([0.9, 0.8]), np.array([1, 1]))
    gt2 = (np.vstack([gt[0], [[0.1, 0.1, 0.1, 0.1]]]), np.array([1, 1]))
    assert evaluate_ap50([pred], [gt2]) == pytest.approx(0.5)


def test_wrong_class_does_not_match():
    gt = (np.array([[0.5, 0.5, 0.4, 0.4]]), np.array([1]))
    pred = Detections(np.array([[0.5, 0.5, 0.4, 0.4]]), np.array([0.9]), np.array([0]))
    assert evaluate_ap50([pred], [gt]) == 0.0


def test_length_mismatch():
    with pytest.raises(ValueError):
        evaluate_ap50([], [(np.zeros((1, 4)), np.zeros(1))])


def random_detections(rng, scenes):
    out = []
    for s in scenes:
        n = int(rng.integers(0, 5))
        boxes = np.column_stack([rng.uniform(0.2, 0.8, (n, 2)), rng.uniform(0.1, 0.4, (n, 2))])
        out.append(Detections(boxes, rng.uniform(size=n), rng.integers(0, 3, n)))
    return out


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_ap_monotonicity(seed):
    rng = np.random.default_rng(seed)
    scenes = [generate_scene(int(rng.integers(2**40))) for _ in range(3)]
    gts = [(s.boxes, s.labels) for s in scenes]
    preds = random_detections(rng, scenes)
    base = evaluate_ap50(preds, gts)
    assert 0.0 <= base <= 1.0
    img = int(rng.integers(3))
    k = int(rng.integers(len(scenes[img].labels)))

    def with_extra(box, score, label):
        p = preds[img]
        extra = Detections(np.vstack([p.boxes, box]), np.append(p.scores, score), np.append(p.labels, label))
        return [extra if i == img else q for i, q in enumerate(preds)]

    correct = with_extra(scenes[img].boxes[k], 2.0, scenes[img].labels[k])
    assert evaluate_ap50(correct, gts) >= base - 1e-12
    wrong = with_extra(scenes[img].boxes[k], -1.0, (scenes[img].labels[k] + 1) % 3)
    assert evaluate_ap50(wrong, gts) <= base + 1e-12
