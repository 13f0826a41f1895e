import numpy as np
import pytest
from sklearn.base import clone

from samdetr.data import generate_scene
from samdetr.estimator import SAMDETRDetector
from samdetr.metrics import Detections
from samdetr.validation import check_boxes, check_images, check_labels, check_targets

SMALL = dict(steps=3, batch_size=2, d=8, n_heads=2, n_queries=3, enc_layers=1, dec_layers=1, n_classes=2)


def dataset(n=4, size=16):
    scenes = [generate_scene(i, size, 2) for i in range(n)]
    return np.stack([s.image for s in scenes]), [(s.boxes, s.labels) for s in scenes]


def test_params_round_trip_through_clone():
    est = SAMDETRDetector(variant="sam-smca", lr=3e-4, **SMALL)
    copy = clone(est)
    assert copy.get_params() == est.get_params()
    assert est.set_params(seed=4).seed == 4


def test_fit_predict_score():
    X, y = dataset()
    est = SAMDETRDetector(**SMALL).fit(X, y)
    assert len(est.loss_curve_) == 3 and all(np.isfinite(est.loss_curve_))
    preds = est.predict(X)
    assert len(preds) == 4 and isinstance(preds[0], Detections)
    assert preds[0].boxes.shape == (3, 4)
    assert 0.0 <= est.score(X, y) <= 1.0


def test_fit_is_deterministic():
    X, y = dataset()
    a = SAMDETRDetector(variant="baseline", **SMALL).fit(X, y)
    b = SAMDETRDetector(variant="baseline", **SMALL).fit(X, y)
    assert a.loss_curve_ == b.loss_curve_


def test_predict_before_fit():
    X, _ = dataset(1)
    with pytest.raises(RuntimeError, match="not fitted"):
        SAMDETRDetector(**SMALL).predict(X)


def test_predict_checks_image_size():
    X, y = dataset()
    est = SAMDETRDetector(**SMALL).fit(X, y)
    with pytest.raises(ValueError, match="16 x 16"):
        est.predict(np.zeros((1, 3, 32, 32)))


def test_validation_helpers():
    with pytest.raises(ValueError):
        check_images(np.zeros((2, 1, 8, 8)))
    with pytest.raises(ValueError):
        check_images(np.full((1, 3, 8, 8), 1.5))
    assert check_images(np.zeros((3, 8, 8))).shape == (1, 3, 8, 8)
    with pytest.raises(ValueError):
        check_boxes([[0.5, 0.5, 0.0, 0.2]])
    with pytest.raises(ValueError):
        check_boxes([[0.95, 0.5, 0.2, 0.2]])
    with pytest.raises(ValueError):
        check_labels([0, 3], 3, 2)
    with pytest.raises(ValueError):
        check_labels([0.5], 3, 1)
    with pytest.raises(ValueError, match="target 0"):
        check_targets([np.zeros(4)], 1, 3)
    with pytest.raises(ValueError):
        check_targets([], 1, 3)
