"""Semantics Aligner: regenerate object queries from encoded image features.

New queries are sampled (never projected) from the encoded feature map inside
each query's reference box, so they live in the same embedding space as the
keys they will be matched against. With the salient-point strategies, a small
ConvNet + MLP head picks ``M`` points per box and each point's feature fills
one attention head's slice of the query.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logit

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Tensor
from .geometry import ROI_SIZE, RegionFeatures, bilinear_point_sample, roi_align, sample_feature_map
from .nn import MLP, Conv2d, Linear, Module, Parameter, sinusoidal_embed_2d

STRATEGIES = ("avg", "max", "sp1", "spm")
SEARCH_RANGES = ("box", "image")


@dataclass(frozen=True)
class AlignerConfig:
    strategy: str = "spm"
    n_heads: int = 8
    reweight: bool = True
    search_range: str = "box"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.search_range not in SEARCH_RANGES:
            raise ValueError(f"search_range must be one of {SEARCH_RANGES}, got {self.search_range!r}")
        if self.n_heads < 1:
            raise ValueError("n_heads must be positive")

    @property
    def uses_points(self) -> bool:
        return self.strategy in ("sp1", "spm")

    @property
    def n_points(self) -> int:
        """Points predicted per box (before replication across heads)."""
        return 1 if self.strategy == "sp1" else self.n_heads


@dataclass
class AlignerOutput:
    queries: Tensor  # N x d
    pos: Tensor  # N x d
    points: Tensor | None  # N x M x 2, box-relative (None for avg/max)
    points_image: Tensor  # N x M x 2, normalized image coordinates
    region: RegionFeatures  # unreduced N x 7 x 7 x d grid
    pooled: Tensor  # N x d, mean of the region grid


def _ring_logits(n_points: int, radius: float = 0.3) -> np.ndarray:
    if n_points == 1:
        return np.zeros(2)
    angle = 2.0 * np.pi * np.arange(n_points) / n_points
    pts = 0.5 + radius * np.stack([np.cos(angle), np.sin(angle)], axis=-1)
    return logit(pts).reshape(-1)


class SemanticsAligner(Module):
    def __init__(self, d: int, config: AlignerConfig):
        m = config.n_heads
        if d % m:
            raise ContractError(f"model width {d} is not divisible by head count {m}")
        if (d // m) % 4:
            raise ContractError(f"per-head width {d // m} is not divisible by 4")
        self.d = d
        self.config = config
        if config.uses_points:
            dr = d // m
            self.reduce = Linear(d, dr)
            self.conv1 = Conv2d(d, d, 3, padding=1, channels_last=True)
            self.conv2 = Conv2d(d, d, 3, padding=1, channels_last=True)
            self.head_reduce = Linear(d, dr)
            self.point_mlp = MLP([ROI_SIZE * ROI_SIZE * dr, d, 2 * config.n_points])
            last = self.point_mlp.layers[-1]
            last.weight.init = ("normal", 1e-2)
            last.bias.init = ("array", _ring_logits(config.n_points))
        if config.reweight:
            self.w_rw1 = Parameter((d, d), ("xavier", d, d))
            self.w_rw2 = Parameter((d, d), ("xavier", d, d))

    @property
    def region_width(self) -> int:
        return self.d // self.config.n_heads

    def __call__(self, features: Tensor, boxes: np.ndarray, q_prev: Tensor) -> AlignerOutput:
        return aligner_forward(features, boxes, q_prev, self)


def predict_salient_points(region_grid: Tensor, aligner: SemanticsAligner) -> Tensor:
    """``sigmoid(MLP(ConvNet(F_R)))`` as an ``N x P x 2`` Tensor in ``(0, 1)``."""
    n = region_grid.shape[0]
    x = ad.relu(aligner.conv1(region_grid))
    x = ad.relu(aligner.conv2(x))
    x = aligner.head_reduce(x)
    logits = aligner.point_mlp(ad.reshape(x, (n, -1)))
    return ad.sigmoid(ad.reshape(logits, (n, aligner.config.n_points, 2)))


def _replicate(t: Tensor, m: int) -> Tensor:
    return t if t.shape[1] == m else ad.concat([t] * m, axis=1)


def resample_queries(region, pts: Tensor | None, config: AlignerConfig) -> Tensor:
    """New query embeddings ``N x d`` from the region grid.

    ``avg``/``max`` pool the unreduced ``N x 7 x 7 x d`` grid; ``sp1``/``spm``
    sample the reduced ``N x 7 x 7 x d/M`` grid at ``pts`` and concatenate the
    per-point vectors in head order (``sp1`` repeats its single point).
    """
    grid = region.grid if isinstance(region, RegionFeatures) else region
    n = grid.shape[0]
    if config.strategy == "avg":
        return ad.reduce_mean(grid, axis=(1, 2))
    if config.strategy == "max":
        return ad.reduce_max(grid, axis=(1, 2))
    if pts is None or pts.shape[1] != config.n_points:
        got = None if pts is None else pts.shape
        raise ContractError(f"strategy {config.strategy} needs {config.n_points} points per box, got {got}")
    feats = bilinear_point_sample(grid, pts)
    feats = _replicate(feats, config.n_heads)
    return ad.reshape(feats, (n, config.n_heads * grid.shape[3]))


def box_to_image_points(boxes_xyxy: np.ndarray, pts: Tensor) -> Tensor:
    """Map box-relative ``(u, v)`` to normalized image ``(x, y)``."""
    n, m, _ = pts.shape
    origin = np.broadcast_to(boxes_xyxy[:, None, :2], (n, m, 2))
    far = np.broadcast_to(boxes_xyxy[:, None, 2:], (n, m, 2))
    out = ad.add(ad.mul(pts, far - origin), origin)
    # rounding in origin + u * size can step an ulp past the far edge
    return ad.minimum(ad.maximum(out, ad.tensor(origin)), ad.tensor(far))


def make_position_embeddings(image_pts: Tensor, d: int) -> Tensor:
    """Concatenate per-point sinusoidal embeddings of width ``d/M`` in head order."""
    n, m, _ = image_pts.shape
    if d % m:
        raise DimensionError(f"width {d} is not divisible by {m} points")
    emb = sinusoidal_embed_2d(image_pts, d // m)
    return ad.reshape(emb, (n, d))


def reweight(q_new: Tensor, q_pos: Tensor, q_prev: Tensor, w_rw1: Tensor, w_rw2: Tensor) -> tuple[Tensor, Tensor]:
    """Modulate new queries and positions by sigmoid gates from the previous queries."""
    if not (q_new.shape == q_pos.shape == q_prev.shape):
        raise DimensionError(f"reweight shapes differ: {q_new.shape}, {q_pos.shape}, {q_prev.shape}")
    gate_q = ad.sigmoid(ad.matmul(q_prev, w_rw1))
    gate_pos = ad.sigmoid(ad.matmul(q_prev, w_rw2))
    return ad.mul(q_new, gate_q), ad.mul(q_pos, gate_pos)


def aligner_forward(features: Tensor, boxes: np.ndarray, q_prev: Tensor, aligner: SemanticsAligner) -> AlignerOutput:
    """RoIAlign, point search, resampling, position embedding and reweighting.

    ``features`` is the ``H x W x d`` encoder output, ``boxes`` the ``N x 4``
    reference boxes (cxcywh, treated as constants) and ``q_prev`` the
    ``N x d`` queries entering the aligner.
    """
    cfg = aligner.config
    m = cfg.n_heads
    region = roi_align(features, boxes)
    xyxy = region.boxes_xyxy
    n = xyxy.shape[0]
    pooled = ad.reduce_mean(region.grid, axis=(1, 2))
    points = None
    if not cfg.uses_points:
        q_new = resample_queries(region, None, cfg)
        centers = np.full((n, m, 2), 0.5)
        image_pts = box_to_image_points(xyxy, ad.tensor(centers))
    else:
        raw = predict_salient_points(region.grid, aligner)
        reduced_map = aligner.reduce(features)
        if cfg.search_range == "box":
            reduced = roi_align(reduced_map, boxes)
            points = _replicate(raw, m)
            q_new = resample_queries(reduced, raw, cfg)
            image_pts = box_to_image_points(xyxy, points)
        else:
            image_pts = _replicate(raw, m)
            feats = sample_feature_map(reduced_map, raw)
            feats = _replicate(feats, m)
            q_new = ad.reshape(feats, (n, aligner.d))
            origin = np.broadcast_to(xyxy[:, None, :2], image_pts.shape)
            size = np.broadcast_to(xyxy[:, None, 2:] - xyxy[:, None, :2], image_pts.shape)
            points = ad.div(ad.sub(image_pts, origin), size)
    pos = make_position_embeddings(image_pts, aligner.d)
    if cfg.reweight:
        q_new, pos = reweight(q_new, pos, q_prev, aligner.w_rw1, aligner.w_rw2)
    return AlignerOutput(q_new, pos, points, image_pts, region, pooled)
