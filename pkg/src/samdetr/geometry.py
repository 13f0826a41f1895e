"""Boxes, IoU/GIoU, RoIAlign and bilinear point sampling.

Boxes are normalized ``(cx, cy, w, h)`` unless a name says ``xyxy``. Feature
maps are channels-last ``H x W x C``; pixel ``(i, j)`` covers the continuous
pixel square ``[j, j+1) x [i, i+1)`` and its value sits at ``(j+0.5, i+0.5)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Tensor

ROI_SIZE = 7


class Box(NamedTuple):
    cx: float
    cy: float
    w: float
    h: float


@dataclass
class RegionFeatures:
    """RoIAligned per-query grids and the clipped boxes they came from."""

    grid: Tensor  # N x 7 x 7 x C
    boxes_xyxy: np.ndarray  # N x 4, clipped to the image


def box_cxcywh_to_xyxy(boxes):
    """Works on arrays (any leading shape) and on ``N x 4`` Tensors."""
    if isinstance(boxes, Tensor):
        cx, cy, w, h = (boxes[:, i : i + 1] for i in range(4))
        half_w, half_h = ad.scale(w, 0.5), ad.scale(h, 0.5)
        return ad.concat([cx - half_w, cy - half_h, cx + half_w, cy + half_h], axis=1)
    b = np.asarray(boxes, dtype=np.float64)
    cx, cy, w, h = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def box_xyxy_to_cxcywh(boxes):
    b = np.asarray(boxes, dtype=np.float64)
    x1, y1, x2, y2 = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], axis=-1)


def box_area(xyxy: np.ndarray) -> np.ndarray:
    return (xyxy[..., 2] - xyxy[..., 0]) * (xyxy[..., 3] - xyxy[..., 1])


def pairwise_iou(a, b) -> tuple[np.ndarray, np.ndarray]:
    """IoU and union of every box in ``a`` against every box in ``b`` (cxcywh)."""
    a = box_cxcywh_to_xyxy(np.atleast_2d(a))
    b = box_cxcywh_to_xyxy(np.atleast_2d(b))
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    return inter / union, union


def pairwise_giou(a, b) -> np.ndarray:
    a2 = box_cxcywh_to_xyxy(np.atleast_2d(a))
    b2 = box_cxcywh_to_xyxy(np.atleast_2d(b))
    iou, union = pairwise_iou(a, b)
    lt = np.minimum(a2[:, None, :2], b2[None, :, :2])
    rb = np.maximum(a2[:, None, 2:], b2[None, :, 2:])
    wh = rb - lt
    hull = wh[..., 0] * wh[..., 1]
    return iou - (hull - union) / hull


def iou(a: Box, b: Box) -> float:
    return float(pairwise_iou(np.asarray(a), np.asarray(b))[0][0, 0])


def giou(a: Box, b: Box) -> float:
    """Generalized IoU of two boxes, in ``(-1, 1]``."""
    return float(pairwise_giou(np.asarray(a), np.asarray(b))[0, 0])


def giou_tensor(pred: Tensor, target: np.ndarray) -> Tensor:
    """Row-wise GIoU between predicted ``K x 4`` boxes and constant targets."""
    p = box_cxcywh_to_xyxy(pred)
    t = box_cxcywh_to_xyxy(np.asarray(target, dtype=np.float64))
    k = pred.shape[0]
    px1, py1, px2, py2 = (p[:, i : i + 1] for i in range(4))
    tx1, ty1, tx2, ty2 = (ad.tensor(t[:, i : i + 1]) for i in range(4))
    zero = ad.tensor(np.zeros((k, 1)))
    iw = ad.maximum(ad.minimum(px2, tx2) - ad.maximum(px1, tx1), zero)
    ih = ad.maximum(ad.minimum(py2, ty2) - ad.maximum(py1, ty1), zero)
    inter = iw * ih
    area_p = (px2 - px1) * (py2 - py1)
    area_t = ad.tensor(((t[:, 2] - t[:, 0]) * (t[:, 3] - t[:, 1]))[:, None])
    union = area_p + area_t - inter
    hw = ad.maximum(px2, tx2) - ad.minimum(px1, tx1)
    hh = ad.maximum(py2, ty2) - ad.minimum(py1, ty1)
    hull = hw * hh
    out = inter / union - (hull - union) / hull
    return ad.reshape(out, (k,))


def clip_boxes_xyxy(boxes) -> np.ndarray:
    """Clip cxcywh boxes to the unit square and return them as xyxy."""
    return np.clip(box_cxcywh_to_xyxy(boxes), 0.0, 1.0)


def roi_bin_coords(boxes_xyxy: np.ndarray, height: int, width: int, size: int = ROI_SIZE) -> np.ndarray:
    """Pixel-index ``(x, y)`` of each bin center, shape ``N x size x size x 2``."""
    frac = (np.arange(size) + 0.5) / size
    x1, y1, x2, y2 = (boxes_xyxy[:, i, None] for i in range(4))
    xs = (x1 + frac * (x2 - x1)) * width - 0.5
    ys = (y1 + frac * (y2 - y1)) * height - 0.5
    n = boxes_xyxy.shape[0]
    gx = np.broadcast_to(xs[:, None, :], (n, size, size))
    gy = np.broadcast_to(ys[:, :, None], (n, size, size))
    return np.stack([gx, gy], axis=-1)


def roi_align(features: Tensor, boxes, size: int = ROI_SIZE) -> RegionFeatures:
    """Extract a ``size x size`` grid per box with one bilinear sample per bin.

    ``features`` is ``H x W x C``; ``boxes`` are normalized cxcywh and are
    clipped to the image before sampling. Differentiable with respect to
    ``features`` only.
    """
    if features.ndim != 3:
        raise DimensionError(f"roi_align expects an H x W x C map, got {features.shape}")
    boxes = np.asarray(boxes.data if isinstance(boxes, Tensor) else boxes, dtype=np.float64)
    xyxy = clip_boxes_xyxy(boxes.reshape(-1, 4))
    degenerate = np.flatnonzero((xyxy[:, 2] <= xyxy[:, 0]) | (xyxy[:, 3] <= xyxy[:, 1]))
    if degenerate.size:
        raise ContractError(f"reference box for query {int(degenerate[0])} is degenerate after clipping")
    H, W, C = features.shape
    n = xyxy.shape[0]
    coords = roi_bin_coords(xyxy, H, W, size).reshape(n * size * size, 2)
    flat = ad.grid_sample(features, coords)
    return RegionFeatures(ad.reshape(flat, (n, size, size, C)), xyxy)


def bilinear_point_sample(region, pts: Tensor) -> Tensor:
    """Sample region grids at box-relative points.

    ``region`` is a :class:`RegionFeatures` or an ``N x G x G x C`` Tensor;
    ``pts`` is ``N x M x 2`` with ``(u, v)`` in ``[0, 1]``, where ``(0, 0)``
    is the center of cell ``(0, 0)`` and ``(1, 1)`` the center of the last
    cell. Differentiable with respect to both the grid and the points.
    """
    grid = region.grid if isinstance(region, RegionFeatures) else region
    pts = ad.tensor(pts) if not isinstance(pts, Tensor) else pts
    if grid.ndim != 4 or pts.ndim != 3 or pts.shape[0] != grid.shape[0] or pts.shape[2] != 2:
        raise DimensionError(f"point sampling: grid {grid.shape} with points {pts.shape}")
    if np.any(pts.data < 0.0) or np.any(pts.data > 1.0):
        raise ContractError("salient points must lie in [0, 1]^2 relative to their box")
    g_h, g_w = grid.shape[1], grid.shape[2]
    if g_h == g_w:
        idx = ad.scale(pts, g_w - 1)
    else:
        idx = ad.mul(pts, np.broadcast_to(np.array([g_w - 1, g_h - 1], dtype=np.float64), pts.shape))
    return ad.grid_sample(grid, idx)


def sample_feature_map(features: Tensor, pts: Tensor) -> Tensor:
    """Sample an ``H x W x C`` map at normalized image points ``N x M x 2``."""
    H, W, C = features.shape
    n, m, _ = pts.shape
    pix = ad.mul(pts, np.broadcast_to(np.array([W, H], dtype=np.float64), pts.shape))
    idx = ad.add_scalar(pix, -0.5)
    out = ad.grid_sample(features, ad.reshape(idx, (n * m, 2)))
    return ad.reshape(out, (n, m, C))
