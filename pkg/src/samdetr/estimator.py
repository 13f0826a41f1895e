"""scikit-learn style wrapper around the detector."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .config import RunConfig
from .data import SceneSample
from .metrics import Detections, evaluate_ap50
from .train import batch_order, build_model, build_optimizer, predict, train_step
from .validation import check_images, check_is_fitted, check_targets


class SAMDETRDetector(BaseEstimator):
    """Set-prediction detector trained with ``fit(images, targets)``.

    ``images`` is ``B x 3 x S x S`` in [0, 1]; ``targets[i]`` is a
    ``(boxes, labels)`` pair with normalized cxcywh boxes. ``predict``
    returns one :class:`Detections` per image and ``score`` the AP50.
    """

    def __init__(self, variant="sam", strategy="spm", reweight=True, search_range="box", steps=200,
                 lr=1e-3, batch_size=4, seed=0, d=64, n_heads=8, n_queries=16, enc_layers=2,
                 dec_layers=2, n_classes=3):
        self.variant = variant
        self.strategy = strategy
        self.reweight = reweight
        self.search_range = search_range
        self.steps = steps
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed
        self.d = d
        self.n_heads = n_heads
        self.n_queries = n_queries
        self.enc_layers = enc_layers
        self.dec_layers = dec_layers
        self.n_classes = n_classes

    def _run_config(self, image_size: int, n_train: int) -> RunConfig:
        params = self.get_params()
        return RunConfig(**params, image_size=image_size, n_train=n_train, out="")

    def fit(self, X, y):
        images = check_images(X)
        targets = check_targets(y, images.shape[0], self.n_classes)
        run = self._run_config(images.shape[2], images.shape[0])
        scenes = [SceneSample(img, b, lab, i) for i, (img, (b, lab)) in enumerate(zip(images, targets))]
        self.model_ = build_model(run)
        opt = build_optimizer(self.model_, run)
        order = batch_order(run.seed, len(scenes), run.steps, run.batch_size)
        self.loss_curve_ = []
        for step in range(1, run.steps + 1):
            if step == run.effective_decay_step + 1:
                opt.lr = run.lr * run.decay_factor
            loss = train_step(self.model_, opt, [scenes[i] for i in order[step - 1]], run.grad_clip)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite training loss at step {step}")
            self.loss_curve_.append(loss)
        self.image_size_ = images.shape[2]
        return self

    def predict(self, X) -> list[Detections]:
        check_is_fitted(self)
        images = check_images(X, self.image_size_)
        return [predict(self.model_, img) for img in images]

    def score(self, X, y) -> float:
        preds = self.predict(X)
        targets = check_targets(y, len(preds), self.n_classes)
        return evaluate_ap50(preds, targets)
