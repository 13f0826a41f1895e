"""Hungarian matching and the set-based detection loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .geometry import giou_tensor, pairwise_giou
from .nn import focal_loss


@dataclass(frozen=True)
class LossWeights:
    cls: float = 2.0
    l1: float = 5.0
    giou: float = 2.0

    def __post_init__(self):
        if min(self.cls, self.l1, self.giou) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]
    unmatched: list[int]

    @property
    def rows(self) -> np.ndarray:
        return np.array([p[0] for p in self.pairs], dtype=np.intp)

    @property
    def cols(self) -> np.ndarray:
        return np.array([p[1] for p in self.pairs], dtype=np.intp)


def _assign_rows(cost: np.ndarray) -> np.ndarray:
    """Shortest-augmenting-path assignment for ``n <= m``; returns column per row."""
    n, m = cost.shape
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.intp)  # owner[j] = 1-based row matched to column j
    way = np.zeros(m + 1, dtype=np.intp)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    col_of_row = np.full(n, -1, dtype=np.intp)
    for j in range(1, m + 1):
        if owner[j]:
            col_of_row[owner[j] - 1] = j - 1
    return col_of_row


def hungarian(cost) -> MatchResult:
    """Minimum-cost one-to-one assignment of ``min(n, m)`` row/column pairs."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ContractError(f"cost must be a matrix, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ContractError("cost matrix contains NaN or infinite entries")
    n, m = cost.shape
    if n == 0 or m == 0:
        return MatchResult([], list(range(n)))
    if n <= m:
        cols = _assign_rows(cost)
        pairs = [(i, int(cols[i])) for i in range(n)]
    else:
        rows = _assign_rows(cost.T)
        pairs = sorted((int(rows[j]), j) for j in range(m))
    matched = {i for i, _ in pairs}
    return MatchResult(pairs, [i for i in range(n) if i not in matched])


def matching_cost(logits, boxes, gt_boxes, gt_labels, weights: LossWeights = LossWeights()) -> np.ndarray:
    """``N x K`` cost: ``-w_cls*p(class) + w_l1*L1 + w_giou*(1 - GIoU)``."""
    logits = np.asarray(logits.data if isinstance(logits, Tensor) else logits)
    boxes = np.asarray(boxes.data if isinstance(boxes, Tensor) else boxes)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_labels = np.asarray(gt_labels, dtype=np.intp).reshape(-1)
    if gt_boxes.shape[0] == 0:
        return np.zeros((boxes.shape[0], 0))
    prob = expit(logits)[:, gt_labels]
    l1 = np.abs(boxes[:, None, :] - gt_boxes[None, :, :]).sum(-1)
    g = pairwise_giou(boxes, gt_boxes)
    return -weights.cls * prob + weights.l1 * l1 + weights.giou * (1.0 - g)


def match(logits, boxes, gt_boxes, gt_labels, weights: LossWeights = LossWeights()) -> MatchResult:
    return hungarian(matching_cost(logits, boxes, gt_boxes, gt_labels, weights))


def layer_loss(logits: Tensor, boxes: Tensor, gt_boxes, gt_labels, weights: LossWeights = LossWeights(),
               matching: MatchResult | None = None) -> Tensor:
    """Set loss of one prediction layer, normalized by ``max(K, 1)``.

    Every query contributes a focal term (matched ones against their GT class,
    the rest against an all-zero row); matched queries add weighted L1 and
    ``1 - GIoU`` box terms.
    """
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_labels = np.asarray(gt_labels, dtype=np.int64).reshape(-1)
    k = gt_boxes.shape[0]
    if matching is None:
        matching = match(logits, boxes, gt_boxes, gt_labels, weights)
    targets = np.full(logits.shape[0], -1, dtype=np.int64)
    rows, cols = matching.rows, matching.cols
    targets[rows] = gt_labels[cols]
    total = ad.scale(focal_loss(logits, targets, reduction="sum"), weights.cls)
    if len(rows):
        pred = ad.take(boxes, rows, axis=0)
        tgt = gt_boxes[cols]
        l1 = ad.reduce_sum(ad.abs(ad.sub(pred, tgt)))
        giou_term = ad.reduce_sum(ad.sub(1.0, giou_tensor(pred, tgt)))
        total = ad.add(total, ad.add(ad.scale(l1, weights.l1), ad.scale(giou_term, weights.giou)))
    return ad.scale(total, 1.0 / max(k, 1))


def match_layers(outputs, gt_boxes, gt_labels, weights: LossWeights = LossWeights()) -> list[MatchResult]:
    return [match(layer.logits, layer.boxes, gt_boxes, gt_labels, weights) for layer in outputs.layers]


def detection_loss(outputs, gt_boxes, gt_labels, weights: LossWeights = LossWeights(),
                   matchings: list[MatchResult] | None = None) -> Tensor:
    """Sum of independently matched per-layer losses (auxiliary supervision).

    Matching is computed on detached values and held fixed while
    differentiating; pass ``matchings`` to reuse a previous assignment.
    """
    if matchings is None:
        matchings = match_layers(outputs, gt_boxes, gt_labels, weights)
    if len(matchings) != len(outputs.layers):
        raise ContractError(f"{len(matchings)} matchings for {len(outputs.layers)} layers")
    total = None
    for layer, m in zip(outputs.layers, matchings):
        term = layer_loss(layer.logits, layer.boxes, gt_boxes, gt_labels, weights, matching=m)
        total = term if total is None else ad.add(total, term)
    return total
