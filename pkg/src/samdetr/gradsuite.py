"""Finite-difference gradient checks for every differentiable op and a micro model.

Each case builds a scalar probe ``sum(op(inputs) * R)`` with a fixed random
``R``; inputs are drawn away from kinks (relu, abs, max ties, cell
boundaries) so central differences are well defined.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .aligner import AlignerConfig, SemanticsAligner
from .autodiff import Tensor
from .geometry import bilinear_point_sample, giou_tensor, roi_align, sample_feature_map
from .matching import detection_loss, match_layers
from .model import ModelConfig, SAMDETRModel, smca_bias
from .nn import MultiHeadAttention, focal_loss, sinusoidal_embed_2d

OP_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _leaf(x) -> Tensor:
    return ad.tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin + x, x)


def _probe(out_fn: Callable[[], Tensor], rng) -> Callable[[], Tensor]:
    """Wrap ``out_fn`` into a scalar loss with fixed random weights."""
    holder = {}

    def fn():
        out = out_fn()
        if "r" not in holder:
            holder["r"] = rng.normal(size=out.shape)
        return ad.reduce_sum(ad.mul(out, holder["r"])) if out.ndim else out

    return fn


def _op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    cases = {}

    def add_case(name, out_fn, leaves):
        cases[name] = (_probe(out_fn, rng), leaves)

    a, b = _leaf(rng.normal(size=(3, 4))), _leaf(rng.normal(size=(3, 4)))
    pos = _leaf(rng.uniform(0.5, 2.0, (3, 4)))
    s = _leaf(rng.normal())
    add_case("add", lambda: ad.add(a, b), [a, b])
    add_case("add_scalar_tensor", lambda: ad.add(a, s), [a, s])
    add_case("sub", lambda: ad.sub(a, b), [a, b])
    add_case("mul", lambda: ad.mul(a, b), [a, b])
    add_case("div", lambda: ad.div(a, pos), [a, pos])
    add_case("neg", lambda: ad.neg(a), [a])
    add_case("scale", lambda: ad.scale(a, 2.5), [a])
    add_case("sigmoid", lambda: ad.sigmoid(a), [a])
    kinked = _leaf(_away_from_zero(rng, (3, 4)))
    add_case("relu", lambda: ad.relu(kinked), [kinked])
    add_case("abs", lambda: ad.abs(kinked), [kinked])
    add_case("exp", lambda: ad.exp(a), [a])
    add_case("log", lambda: ad.log(pos), [pos])
    add_case("softplus", lambda: ad.softplus(a), [a])
    add_case("sqrt", lambda: ad.sqrt(pos), [pos])
    add_case("power", lambda: ad.power(pos, 2.5), [pos])
    gap = _leaf(a.data + np.where(rng.random((3, 4)) < 0.5, -0.5, 0.5))
    add_case("minimum", lambda: ad.minimum(a, gap), [a, gap])
    add_case("maximum", lambda: ad.maximum(a, gap), [a, gap])

    m1, m2 = _leaf(rng.normal(size=(3, 5))), _leaf(rng.normal(size=(5, 2)))
    add_case("matmul", lambda: ad.matmul(m1, m2), [m1, m2])
    b1, b2 = _leaf(rng.normal(size=(2, 3, 4))), _leaf(rng.normal(size=(2, 4, 3)))
    add_case("matmul_batched", lambda: ad.matmul(b1, b2), [b1, b2])
    x3 = _leaf(rng.normal(size=(2, 3, 4)))
    w, bias = _leaf(rng.normal(size=(4, 5))), _leaf(rng.normal(size=5))
    add_case("linear", lambda: ad.linear(x3, w, bias), [x3, w, bias])
    add_case("softmax", lambda: ad.softmax(x3, axis=-1), [x3])
    gamma, beta = _leaf(rng.normal(size=4)), _leaf(rng.normal(size=4))
    add_case("layer_norm", lambda: ad.layer_norm(x3, gamma, beta), [x3, gamma, beta])

    img = _leaf(rng.normal(size=(2, 6, 6)))
    ker, kb = _leaf(rng.normal(size=(3, 2, 3, 3))), _leaf(rng.normal(size=3))
    add_case("conv2d", lambda: ad.conv2d(img, ker, kb, stride=1, padding=1), [img, ker, kb])
    add_case("conv2d_strided", lambda: ad.conv2d(img, ker, None, stride=2, padding=1), [img, ker])
    bimg = _leaf(rng.normal(size=(2, 5, 5, 2)))
    add_case("conv2d_nhwc_batched", lambda: ad.conv2d_nhwc(bimg, ker, kb, stride=1, padding=0), [bimg, ker, kb])

    c1, c2 = _leaf(rng.normal(size=(2, 3))), _leaf(rng.normal(size=(2, 2)))
    add_case("concat", lambda: ad.concat([c1, c2], axis=1), [c1, c2])
    add_case("getitem_slice", lambda: ad.getitem(x3, (slice(None), 1, slice(1, 3))), [x3])
    add_case("getitem_fancy", lambda: ad.getitem(a, (np.array([0, 2, 0]), np.array([1, 1, 3]))), [a])
    add_case("reshape", lambda: ad.reshape(x3, (4, 6)), [x3])
    add_case("transpose", lambda: ad.transpose(x3, (2, 0, 1)), [x3])
    row = _leaf(rng.normal(size=(1, 4)))
    add_case("broadcast_to", lambda: ad.broadcast_to(row, (3, 4)), [row])
    add_case("reduce_sum", lambda: ad.reduce_sum(x3, axis=(0, 2)), [x3])
    add_case("reduce_mean", lambda: ad.reduce_mean(x3, axis=1, keepdims=True), [x3])
    distinct = _leaf(rng.permutation(24).reshape(2, 3, 4) * 0.1 + rng.uniform(0, 0.01, (2, 3, 4)))
    add_case("reduce_max", lambda: ad.reduce_max(distinct, axis=(1, 2)), [distinct])
    add_case("take", lambda: ad.take(a, np.array([2, 0, 2]), axis=0), [a])

    grid = _leaf(rng.normal(size=(5, 6, 3)))
    cells = rng.integers(0, 4, (7, 2)) + rng.uniform(0.1, 0.9, (7, 2))
    coords = _leaf(cells)
    add_case("grid_sample", lambda: ad.grid_sample(grid, coords), [grid, coords])

    feats = _leaf(rng.normal(size=(6, 6, 4)))
    boxes = np.array([[0.4, 0.5, 0.37, 0.41], [0.6, 0.35, 0.29, 0.33]])
    add_case("roi_align", lambda: roi_align(feats, boxes).grid, [feats])
    region = _leaf(rng.normal(size=(2, 7, 7, 4)))
    pts = _leaf((rng.integers(0, 6, (2, 3, 2)) + rng.uniform(0.1, 0.9, (2, 3, 2))) / 6.0)
    add_case("bilinear_point_sample", lambda: bilinear_point_sample(region, pts), [region, pts])
    img_pts = _leaf((rng.integers(0, 6, (2, 3, 2)) + rng.uniform(0.1, 0.9, (2, 3, 2))) / 6.0 + 1.0 / 12.0)
    add_case("sample_feature_map", lambda: sample_feature_map(feats, img_pts), [feats, img_pts])

    emb_pts = _leaf(rng.uniform(0, 1, (3, 2, 2)))
    add_case("sinusoidal_embed_2d", lambda: sinusoidal_embed_2d(emb_pts, 8), [emb_pts])
    centers = _leaf(rng.uniform(0, 1, (2, 3, 2)))
    scales = _leaf(rng.uniform(0.1, 0.5, (2, 3)))
    keys = rng.uniform(0, 1, (5, 2))
    add_case("smca_bias", lambda: smca_bias(centers, scales, keys), [centers, scales])

    logits = _leaf(rng.normal(size=(4, 3)))
    targets = np.array([0, -1, 2, -1])
    add_case("focal_loss", lambda: focal_loss(logits, targets, reduction="sum"), [logits])
    pred = _leaf(np.array([[0.5, 0.5, 0.3, 0.4], [0.3, 0.6, 0.2, 0.25]]))
    tgt = np.array([[0.55, 0.47, 0.35, 0.3], [0.7, 0.2, 0.1, 0.1]])
    add_case("giou", lambda: giou_tensor(pred, tgt), [pred])

    mha = MultiHeadAttention(8, 2)
    mha.reset_parameters(int(rng.integers(1 << 30)))
    q, qp = _leaf(rng.normal(size=(3, 8))), _leaf(rng.normal(size=(3, 8)))
    k, kp = _leaf(rng.normal(size=(5, 8))), _leaf(rng.normal(size=(5, 8)))
    att_bias = _leaf(rng.normal(size=(2, 3, 5)))
    add_case(
        "multi_head_attention",
        lambda: mha(q, qp, k, kp, k, att_bias)[0],
        [q, qp, k, kp, att_bias] + mha.parameters(),
    )

    aligner = SemanticsAligner(8, AlignerConfig("spm", 2, True, "box"))
    aligner.reset_parameters(int(rng.integers(1 << 30)))
    afeat = _leaf(rng.normal(size=(4, 4, 8)))
    aboxes = np.array([[0.5, 0.5, 0.6, 0.5], [0.35, 0.6, 0.4, 0.5]])
    aprev = _leaf(rng.normal(size=(2, 8)))

    def aligner_out():
        out = aligner(afeat, aboxes, aprev)
        return ad.concat([out.queries, out.pos], axis=1)

    add_case("semantics_aligner", aligner_out, [afeat, aprev] + aligner.parameters())
    return cases


def run_op_checks(seed: int = 0, h: float = 1e-5) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, (fn, leaves) in _op_cases(rng).items():
        results.append(CheckResult(name, ad.gradcheck(fn, leaves, h=h), OP_TOLERANCE))
    return results


MICRO_CONFIG = ModelConfig(d=8, n_heads=2, n_queries=2, enc_layers=1, dec_layers=1, n_classes=2,
                           image_size=16, stride=4, variant="sam_smca")


def sampled_gradcheck(fn, params, rng, per_param: int = 4, h: float = 1e-5, floor: float = 1e-6) -> float:
    """Like :func:`gradcheck` but probes ``per_param`` random entries of each parameter."""
    for p in params:
        p.grad = None
    ad.backward(fn())
    worst = 0.0
    with ad.no_grad():
        for p in params:
            analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
            base = np.array(p.data, copy=True)
            picks = rng.choice(p.size, size=min(per_param, p.size), replace=False)
            for flat in picks:
                idx = np.unravel_index(flat, p.shape)
                vals = []
                for sign in (1.0, -1.0):
                    bumped = base.copy()
                    bumped[idx] += sign * h
                    bumped.flags.writeable = False
                    p.data = bumped
                    vals.append(float(fn().data))
                numeric = (vals[0] - vals[1]) / (2.0 * h)
                a = float(analytic[idx])
                worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), floor))
            base.flags.writeable = False
            p.data = base
    return worst


def run_model_check(seed: int = 0, config: ModelConfig = MICRO_CONFIG, per_param: int = 4) -> CheckResult:
    """End-to-end check of the detection loss of a micro model.

    Matching is computed once and held fixed. Reference boxes enter RoIAlign
    and the point-to-image mapping as constants, so ``reference_logits`` is
    only checked for the baseline variant.
    """
    rng = np.random.default_rng(seed)
    model = SAMDETRModel(config, seed=seed)
    image = rng.uniform(0, 1, (3, config.image_size, config.image_size))
    gt_boxes = np.array([[0.4, 0.45, 0.3, 0.35], [0.7, 0.7, 0.25, 0.2]])
    gt_labels = np.array([0, 1])
    with ad.no_grad():
        matchings = match_layers(model(image), gt_boxes, gt_labels)

    def fn():
        return detection_loss(model(image), gt_boxes, gt_labels, matchings=matchings)

    params = [p for name, p in model.named_parameters()
              if config.variant == "baseline" or name != "reference_logits"]
    err = sampled_gradcheck(fn, params, rng, per_param=per_param)
    return CheckResult(f"model[{config.variant}]", err, MODEL_TOLERANCE)


def run_all(seed: int = 0) -> list[CheckResult]:
    results = run_op_checks(seed)
    for variant in ("baseline", "sam", "sam_smca"):
        cfg = ModelConfig(**{**{f: getattr(MICRO_CONFIG, f) for f in ModelConfig.field_names()}, "variant": variant})
        results.append(run_model_check(seed, cfg))
    return results
