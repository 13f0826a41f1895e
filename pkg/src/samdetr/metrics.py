"""AP at IoU 0.5 with greedy matching."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import pairwise_iou


@dataclass
class Detections:
    boxes: np.ndarray  # P x 4 cxcywh
    scores: np.ndarray  # P
    labels: np.ndarray  # P


def interpolated_ap(tp: np.ndarray, n_gt: int) -> float:
    """Area under the all-point interpolated precision/recall curve.

    ``tp`` flags each ranked prediction as a true positive.
    """
    if n_gt == 0:
        return float("nan")
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, tp.size + 1)
    mrec = np.concatenate([[0.0], recall, [recall[-1]]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def evaluate_ap50(predictions, gts, iou_threshold: float = 0.5) -> float:
    """Mean over classes present in ``gts`` of AP at ``iou_threshold``.

    ``predictions[i]`` is a :class:`Detections` (or a ``(boxes, scores,
    labels)`` tuple) for image ``i``; ``gts[i]`` is ``(boxes, labels)``.
    Within each class predictions are ranked by score across all images and
    greedily matched to the unclaimed ground truth of highest IoU.
    """
    if len(predictions) != len(gts):
        raise ValueError(f"{len(predictions)} prediction sets for {len(gts)} images")
    preds = [p if isinstance(p, Detections) else Detections(*map(np.asarray, p)) for p in predictions]
    gt_boxes = [np.asarray(g[0], dtype=np.float64).reshape(-1, 4) for g in gts]
    gt_labels = [np.asarray(g[1], dtype=np.int64).reshape(-1) for g in gts]
    classes = sorted(set(np.concatenate(gt_labels).tolist())) if gt_labels else []
    if not classes:
        return 0.0
    aps = []
    for c in classes:
        entries = []
        for img, p in enumerate(preds):
            for j in np.flatnonzero(np.asarray(p.labels) == c):
                entries.append((-float(p.scores[j]), img, int(j)))
        entries.sort()
        claimed = [np.zeros(int(np.sum(lab == c)), dtype=bool) for lab in gt_labels]
        tp = np.zeros(len(entries))
        for rank, (_, img, j) in enumerate(entries):
            mask = gt_labels[img] == c
            if not mask.any():
                continue
            ious = pairwise_iou(preds[img].boxes[j], gt_boxes[img][mask])[0][0]
            ious = np.where(claimed[img], -1.0, ious)
            best = int(np.argmax(ious))
            if ious[best] >= iou_threshold:
                claimed[img][best] = True
                tp[rank] = 1.0
        n_gt = sum(int(np.sum(lab == c)) for lab in gt_labels)
        aps.append(interpolated_ap(tp, n_gt))
    return float(np.mean(aps))
