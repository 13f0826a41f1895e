"""Toy DETR-style detector with a selectable decoder variant.

``baseline`` feeds the decoder queries and their reference-box position
embeddings straight into cross-attention. ``sam`` inserts the Semantics
Aligner between self- and cross-attention. ``sam_smca`` additionally adds a
Gaussian bias centred on each head's salient point to the cross-attention
logits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np
from scipy.special import logit

from . import autodiff as ad
from .aligner import AlignerConfig, SemanticsAligner
from .autodiff import ContractError, DimensionError, Tensor
from .nn import MLP, Conv2d, LayerNorm, Linear, Module, MultiHeadAttention, Parameter, sinusoidal_embed_2d

VARIANTS = ("baseline", "sam", "sam_smca")


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    n_heads: int = 8
    n_queries: int = 16
    enc_layers: int = 2
    dec_layers: int = 2
    n_classes: int = 3
    image_size: int = 64
    stride: int = 8
    variant: str = "sam"
    strategy: str = "spm"
    reweight: bool = True
    search_range: str = "box"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.d % self.n_heads:
            raise ValueError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        if (self.d // self.n_heads) % 4:
            raise ValueError(f"d/n_heads={self.d // self.n_heads} is not divisible by 4")
        if self.dec_layers < 1 or self.enc_layers < 0:
            raise ValueError("need at least one decoder layer and a non-negative encoder depth")
        if self.stride < 2 or self.stride & (self.stride - 1):
            raise ValueError(f"stride must be a power of two, got {self.stride}")
        if self.image_size % self.stride:
            raise ValueError(f"image_size {self.image_size} is not divisible by stride {self.stride}")
        if self.n_queries < 1 or self.n_classes < 1:
            raise ValueError("n_queries and n_classes must be positive")
        AlignerConfig(self.strategy, self.n_heads, self.reweight, self.search_range)

    @property
    def aligner(self) -> AlignerConfig:
        return AlignerConfig(self.strategy, self.n_heads, self.reweight, self.search_range)

    @property
    def feature_size(self) -> int:
        return self.image_size // self.stride

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))


@dataclass
class EncodedFeatures:
    features: Tensor  # H x W x d
    pos2d: np.ndarray  # H x W x d

    @property
    def flat(self) -> Tensor:
        h, w, d = self.features.shape
        return ad.reshape(self.features, (h * w, d))


@dataclass
class LayerOutput:
    logits: Tensor  # N x C
    boxes: Tensor  # N x 4 cxcywh
    attention: np.ndarray  # M x N x HW
    points_image: np.ndarray | None = None  # N x M x 2
    points: np.ndarray | None = None  # N x M x 2, box-relative


@dataclass
class DetectionOutput:
    layers: list[LayerOutput] = field(default_factory=list)
    reference_boxes: np.ndarray | None = None

    @property
    def final(self) -> LayerOutput:
        return self.layers[-1]

    def __len__(self) -> int:
        return len(self.layers)


def pixel_centers(height: int, width: int) -> np.ndarray:
    """Normalized ``(x, y)`` of every pixel center, shape ``H x W x 2``."""
    xs = (np.arange(width) + 0.5) / width
    ys = (np.arange(height) + 0.5) / height
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)


def smca_bias(centers: Tensor, scales: Tensor, key_xy: np.ndarray) -> Tensor:
    """Gaussian log-weights ``-|k - c|^2 / (2 s^2)`` as an ``M x N x S`` bias.

    ``centers`` is ``N x M x 2`` (normalized image coordinates), ``scales``
    ``N x M`` and ``key_xy`` the ``S x 2`` key locations.
    """
    c = centers.data
    s = scales.data
    if c.shape[:2] != s.shape or c.shape[-1] != 2 or key_xy.shape[-1] != 2:
        raise DimensionError(f"smca_bias: centers {c.shape}, scales {s.shape}, keys {key_xy.shape}")
    dx = key_xy[None, None, :, 0] - c[..., 0:1]
    dy = key_xy[None, None, :, 1] - c[..., 1:2]
    d2 = dx * dx + dy * dy
    inv = 1.0 / (s * s)[..., None]
    out = (-0.5 * d2 * inv).transpose(1, 0, 2)

    def grad_fn(g):
        g = g.transpose(1, 0, 2)
        gc = np.stack([(g * dx * inv).sum(-1), (g * dy * inv).sum(-1)], axis=-1)
        gs = (g * d2 * inv).sum(-1) / s
        return gc, gs

    return ad.record(out, (centers, scales), grad_fn)


class EncoderLayer(Module):
    def __init__(self, d: int, n_heads: int):
        self.self_attn = MultiHeadAttention(d, n_heads)
        self.norm1 = LayerNorm(d)
        self.ffn = MLP([d, 4 * d, d])
        self.norm2 = LayerNorm(d)

    def __call__(self, x: Tensor, pos: Tensor) -> Tensor:
        attn, _ = self.self_attn(x, pos, x, pos, x)
        x = self.norm1(ad.add(x, attn))
        return self.norm2(ad.add(x, self.ffn(x)))


class DecoderLayer(Module):
    def __init__(self, config: ModelConfig):
        d, m = config.d, config.n_heads
        self.variant = config.variant
        self.self_attn = MultiHeadAttention(d, m)
        self.norm1 = LayerNorm(d)
        if config.variant != "baseline":
            self.aligner = SemanticsAligner(d, config.aligner)
        if config.variant == "sam_smca":
            self.smca_scale = Linear(d, m)
            self.smca_scale.weight.init = ("normal", 1e-3)
            # softplus(b) = 0.2 of the image side
            self.smca_scale.bias.init = ("const", math.log(math.expm1(0.2)))
        self.cross_attn = MultiHeadAttention(d, m)
        self.norm2 = LayerNorm(d)
        self.ffn = MLP([d, 4 * d, d])
        self.norm3 = LayerNorm(d)

    def __call__(self, enc: EncodedFeatures, q: Tensor, q_pos: Tensor, ref_boxes: np.ndarray):
        """Returns the updated queries plus (attention, image points, box points)."""
        sa, _ = self.self_attn(q, q_pos, q, q_pos, q)
        q = self.norm1(ad.add(q, sa))
        bias = None
        points_image = points = None
        if self.variant == "baseline":
            query, query_pos = q, q_pos
        else:
            out = self.aligner(enc.features, ref_boxes, q)
            query, query_pos = out.queries, out.pos
            points_image = out.points_image.data
            points = None if out.points is None else out.points.data
            if self.variant == "sam_smca":
                scales = ad.softplus(self.smca_scale(out.pooled))
                h, w, _ = enc.features.shape
                bias = smca_bias(out.points_image, scales, pixel_centers(h, w).reshape(-1, 2))
        keys = enc.flat
        pos = ad.tensor(enc.pos2d.reshape(keys.shape))
        ca, weights = self.cross_attn(query, query_pos, keys, pos, keys, bias)
        q = self.norm2(ad.add(q, ca))
        q = self.norm3(ad.add(q, self.ffn(q)))
        return q, (weights.data, points_image, points)


class PredictionHead(Module):
    def __init__(self, d: int, n_classes: int, prior: float = 0.01):
        self.cls = Linear(d, n_classes)
        self.cls.bias.init = ("const", -math.log((1.0 - prior) / prior))
        self.box = MLP([d, d, d, 4])
        self.box.layers[-1].weight.init = ("const", 0.0)

    def __call__(self, q: Tensor, ref_logits: Tensor):
        return predict_heads(q, ref_logits, self)


def predict_heads(q: Tensor, ref_logits: Tensor, head: PredictionHead) -> tuple[Tensor, Tensor]:
    """Class logits and boxes ``sigmoid(ref_logits + delta)``.

    ``ref_logits`` are the reference boxes in inverse-sigmoid space, so zero
    deltas reproduce the reference boxes exactly.
    """
    logits = head.cls(q)
    delta = head.box(q)
    return logits, ad.sigmoid(ad.add(ref_logits, delta))


def _draw_reference_logits(rng: np.random.Generator, shape) -> np.ndarray:
    n = shape[0]
    centers = rng.uniform(0.1, 0.9, (n, 2))
    sizes = np.full((n, 2), 0.3)
    return logit(np.concatenate([centers, sizes], axis=1))


class SAMDETRModel(Module):
    """Backbone, transformer encoder, decoder stack and prediction heads."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        d = config.d
        n_stages = int(round(math.log2(config.stride)))
        widths = [3] + [d] * n_stages
        self.backbone = [
            Conv2d(a, b, 3, stride=2, padding=1, channels_last=True) for a, b in zip(widths[:-1], widths[1:])
        ]
        self.encoder = [EncoderLayer(d, config.n_heads) for _ in range(config.enc_layers)]
        self.decoder = [DecoderLayer(config) for _ in range(config.dec_layers)]
        self.reference_logits = Parameter((config.n_queries, 4), ("fn", _draw_reference_logits))
        if config.dec_layers > 1:
            self.aux_head = PredictionHead(d, config.n_classes)
        self.head = PredictionHead(d, config.n_classes)
        fs = config.feature_size
        self._pos2d = sinusoidal_embed_2d(pixel_centers(fs, fs), d).data
        self.reset_parameters(seed)

    def backbone_parameters(self) -> list[Parameter]:
        return [p for conv in self.backbone for p in conv.parameters()]

    def head_for_layer(self, index: int) -> PredictionHead:
        return self.head if index == self.config.dec_layers - 1 else self.aux_head

    def encode(self, image) -> EncodedFeatures:
        s = self.config.image_size
        image = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
        if image.ndim != 3 or image.shape[0] != 3:
            raise DimensionError(f"expected a 3 x S x S image, got {image.shape}")
        if image.shape[1] % self.config.stride or image.shape[2] % self.config.stride:
            raise ContractError(f"image side {image.shape[1:]} is not divisible by stride {self.config.stride}")
        if image.shape[1:] != (s, s):
            raise DimensionError(f"model expects {s} x {s} images, got {image.shape[1:]}")
        x = ad.tensor(image.transpose(1, 2, 0))
        for conv in self.backbone:
            x = ad.relu(conv(x))
        fs = self.config.feature_size
        d = self.config.d
        tokens = ad.reshape(x, (fs * fs, d))
        pos = ad.tensor(self._pos2d.reshape(fs * fs, d))
        for layer in self.encoder:
            tokens = layer(tokens, pos)
        return EncodedFeatures(ad.reshape(tokens, (fs, fs, d)), self._pos2d)

    def __call__(self, image) -> DetectionOutput:
        return self.forward(image)

    def forward(self, image) -> DetectionOutput:
        enc = self.encode(image)
        ref = ad.sigmoid(self.reference_logits)
        ref_boxes = ref.data
        q_pos = sinusoidal_embed_2d(ref[:, :2], self.config.d)
        q = ad.tensor(np.zeros((self.config.n_queries, self.config.d)))
        out = DetectionOutput(reference_boxes=ref_boxes)
        for i, layer in enumerate(self.decoder):
            q, (attn, pts_img, pts) = layer(enc, q, q_pos, ref_boxes)
            logits, boxes = predict_heads(q, self.reference_logits, self.head_for_layer(i))
            out.layers.append(LayerOutput(logits, boxes, attn, pts_img, pts))
        return out
