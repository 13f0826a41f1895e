"""Shared checks used by several test modules and the acceptance harness."""

import numpy as np

from samdetr import autodiff as ad
from samdetr.aligner import AlignerConfig, SemanticsAligner
from samdetr.geometry import clip_boxes_xyxy, roi_align


def random_boxes(rng, n, min_size=0.05, max_size=1.2):
    """cxcywh boxes whose clipped extent is never empty."""
    c = rng.uniform(0.05, 0.95, (n, 2))
    wh = rng.uniform(min_size, max_size, (n, 2))
    return np.column_stack([c, wh])


def random_aligner(rng, d=16, m=4, strategy="spm", reweight=False, search_range="box", scale=1.0):
    aligner = SemanticsAligner(d, AlignerConfig(strategy, m, reweight, search_range))
    aligner.reset_parameters(int(rng.integers(2**31)))
    for p in aligner.parameters():
        p.assign(p.data + scale * rng.normal(size=p.shape) * (p.data.std() + 0.1))
    return aligner


def containment_violations(aligner, features, boxes, queries, tol=1e-12):
    """Count query entries outside the channel range of the features they were sampled from.

    For point strategies the source is the reduced map (per head slice); for
    pooling strategies it is the full region grid. ``image`` search range
    compares against the whole reduced map.
    """
    cfg = aligner.config
    q = np.asarray(queries)
    n = q.shape[0]
    if cfg.uses_points:
        reduced = aligner.reduce(features).data
        if cfg.search_range == "box":
            src = roi_align(ad.tensor(reduced), boxes).grid.data
            lo, hi = src.min(axis=(1, 2)), src.max(axis=(1, 2))
        else:
            lo = np.broadcast_to(reduced.min(axis=(0, 1)), (n, reduced.shape[2]))
            hi = np.broadcast_to(reduced.max(axis=(0, 1)), (n, reduced.shape[2]))
        lo, hi = np.tile(lo, (1, cfg.n_heads)), np.tile(hi, (1, cfg.n_heads))
    else:
        src = roi_align(features, boxes).grid.data
        lo, hi = src.min(axis=(1, 2)), src.max(axis=(1, 2))
    span = np.maximum(np.abs(lo), np.abs(hi))
    return int(np.sum((q < lo - tol * (1 + span)) | (q > hi + tol * (1 + span))))


def points_outside_boxes(points_image, boxes):
    """Salient points (normalized image coords) outside their clipped reference boxes."""
    xyxy = clip_boxes_xyxy(boxes)[:, None, :]
    p = np.asarray(points_image)
    inside = (p[..., 0] >= xyxy[..., 0]) & (p[..., 0] <= xyxy[..., 2])
    inside &= (p[..., 1] >= xyxy[..., 1]) & (p[..., 1] <= xyxy[..., 3])
    return int(np.sum(~inside))
