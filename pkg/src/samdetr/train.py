"""Training loop, evaluation and run artifacts."""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .checkpoint import save_checkpoint
from .config import RunConfig
from .data import SceneSample, make_split
from .matching import detection_loss
from .metrics import Detections, evaluate_ap50
from .model import SAMDETRModel
from .nn import AdamW, clip_grad_norm

METRICS_HEADER = "step,train_loss,val_ap50,wall_ms"
TRAIN_SPLIT, VAL_SPLIT = 0, 1


class TrainingError(RuntimeError):
    pass


@dataclass
class MetricsRow:
    step: int
    train_loss: float
    val_ap50: float
    wall_ms: float

    def to_csv(self) -> str:
        return f"{self.step},{self.train_loss:.9g},{self.val_ap50:.9g},{self.wall_ms:.9g}"


@dataclass
class TrainResult:
    model: SAMDETRModel
    history: list[MetricsRow] = field(default_factory=list)

    @property
    def final(self) -> MetricsRow:
        return self.history[-1]


def build_model(run: RunConfig) -> SAMDETRModel:
    return SAMDETRModel(run.model_config(), seed=run.seed)


def build_optimizer(model: SAMDETRModel, run: RunConfig) -> AdamW:
    backbone = {id(p) for p in model.backbone_parameters()}
    rest = [p for p in model.parameters() if id(p) not in backbone]
    groups = [
        {"params": model.backbone_parameters(), "lr_scale": run.backbone_lr_scale},
        {"params": rest, "lr_scale": 1.0},
    ]
    return AdamW(groups, lr=run.lr, weight_decay=run.weight_decay)


def predict(model: SAMDETRModel, image) -> Detections:
    """Every query becomes a detection scored by its top class probability."""
    with ad.no_grad():
        final = model(image).final
    prob = expit(final.logits.data)
    return Detections(final.boxes.data.copy(), prob.max(axis=1), prob.argmax(axis=1))


def evaluate(model: SAMDETRModel, scenes: list[SceneSample]) -> float:
    preds = [predict(model, s.image) for s in scenes]
    return evaluate_ap50(preds, [(s.boxes, s.labels) for s in scenes])


def batch_order(seed: int, n_train: int, steps: int, batch_size: int) -> np.ndarray:
    """``steps x batch_size`` scene indices from reshuffled epochs."""
    rng = np.random.default_rng([int(seed), 0x5EED])
    need = steps * batch_size
    chunks, total = [], 0
    while total < need:
        chunks.append(rng.permutation(n_train))
        total += n_train
    return np.concatenate(chunks)[:need].reshape(steps, batch_size)


def train_step(model: SAMDETRModel, opt: AdamW, batch: list[SceneSample], grad_clip: float) -> float:
    """One optimizer step on the mean loss of ``batch``, accumulated image by image."""
    opt.zero_grad()
    total = 0.0
    scale = 1.0 / len(batch)
    for scene in batch:
        out = model(scene.image)
        loss = detection_loss(out, scene.boxes, scene.labels)
        value = loss.item()
        if not np.isfinite(value):
            return value
        ad.backward(ad.scale(loss, scale))
        total += value * scale
    if grad_clip > 0:
        clip_grad_norm(opt.params, grad_clip)
    opt.step()
    return total


def train(run: RunConfig, out_dir=None, log=None) -> TrainResult:
    """Train one run; writes ``metrics.csv``, ``config.txt`` and ``model.ckpt``.

    A metrics row is written every ``eval_interval`` steps and after the last
    step; ``train_loss`` is the mean step loss since the previous row.
    """
    out_dir = run.out if out_dir is None else out_dir
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8", newline="\n") as f:
            f.write(run.to_text())
    mc = run.model_config()
    train_set = make_split(run.seed, TRAIN_SPLIT, run.n_train, mc.image_size, mc.n_classes)
    val_set = make_split(run.seed, VAL_SPLIT, run.n_val, mc.image_size, mc.n_classes)
    model = build_model(run)
    opt = build_optimizer(model, run)
    order = batch_order(run.seed, run.n_train, run.steps, run.batch_size)
    result = TrainResult(model)
    metrics_file = None
    if out_dir:
        metrics_file = open(os.path.join(out_dir, "metrics.csv"), "w", encoding="utf-8", newline="\n")
        metrics_file.write(METRICS_HEADER + "\n")
    start = time.perf_counter()
    window = []
    try:
        for step in range(1, run.steps + 1):
            if step == run.effective_decay_step + 1:
                opt.lr = run.lr * run.decay_factor
            loss = train_step(model, opt, [train_set[i] for i in order[step - 1]], run.grad_clip)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite training loss at step {step}")
            window.append(loss)
            if step % run.eval_interval == 0 or step == run.steps:
                ap = evaluate(model, val_set)
                wall = (time.perf_counter() - start) * 1e3 if run.wall_clock else 0.0
                row = MetricsRow(step, float(np.mean(window)), ap, wall)
                window = []
                result.history.append(row)
                if metrics_file:
                    metrics_file.write(row.to_csv() + "\n")
                    metrics_file.flush()
                if log:
                    log(f"step {step} loss {row.train_loss:.4f} ap50 {ap:.4f} ({wall / 1e3:.0f}s)")
    finally:
        if metrics_file:
            metrics_file.close()
    if out_dir:
        save_checkpoint(os.path.join(out_dir, "model.ckpt"), model)
    return result


def read_metrics(path) -> list[MetricsRow]:
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != METRICS_HEADER:
        raise ValueError(f"{path}: missing metrics header")
    rows = []
    for line in lines[1:]:
        step, loss, ap, wall = line.split(",")
        rows.append(MetricsRow(int(step), float(loss), float(ap), float(wall)))
    return rows
