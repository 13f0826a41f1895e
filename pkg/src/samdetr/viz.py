"""Attention-map and salient-point dumps for the final decoder layer."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import SceneSample
from .matching import match
from .model import DetectionOutput, SAMDETRModel


@dataclass
class AttentionDump:
    maps: np.ndarray  # N x M x H x W uint8
    mean_maps: np.ndarray  # N x H x W uint8
    points: np.ndarray  # N x M x 2 normalized image (x, y)
    output: DetectionOutput


def to_uint8(values: np.ndarray) -> np.ndarray:
    """Min-max normalize to 0..255; a constant map becomes all zeros."""
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        return np.zeros(values.shape, dtype=np.uint8)
    return np.rint((values - lo) * (255.0 / (hi - lo))).astype(np.uint8)


def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(image.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary ``P5`` grayscale image with maxval 255."""
    with open(path, "rb") as f:
        blob = f.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        end = pos
        while not blob[end : end + 1].isspace():
            end += 1
        tokens.append(blob[pos:end])
        pos = end
    if tokens[0] != b"P5" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: not a P5 image with maxval 255")
    w, h = int(tokens[1]), int(tokens[2])
    pixels = np.frombuffer(blob[pos + 1 :], dtype=np.uint8)
    if pixels.size != w * h:
        raise ValueError(f"{path}: expected {w * h} pixels, found {pixels.size}")
    return pixels.reshape(h, w)


def final_points(model: SAMDETRModel, output: DetectionOutput) -> np.ndarray:
    """Final-layer salient points; models without them report reference centers per head."""
    pts = output.final.points_image
    if pts is not None:
        return pts
    m = model.config.n_heads
    centers = output.reference_boxes[:, :2]
    return np.repeat(centers[:, None, :], m, axis=1)


def attention_dump(model: SAMDETRModel, image) -> AttentionDump:
    with ad.no_grad():
        out = model(image)
    fs = model.config.feature_size
    weights = out.final.attention  # M x N x HW
    m, n, _ = weights.shape
    per_head = weights.transpose(1, 0, 2).reshape(n, m, fs, fs)
    maps = np.stack([[to_uint8(per_head[q, h]) for h in range(m)] for q in range(n)])
    means = np.stack([to_uint8(per_head[q].mean(axis=0)) for q in range(n)])
    return AttentionDump(maps, means, final_points(model, out), out)


def dump_attention(model: SAMDETRModel, image, out_dir) -> AttentionDump:
    """Write ``q{query}_h{head}.pgm``, ``q{query}_mean.pgm`` and ``points.txt``."""
    dump = attention_dump(model, image)
    os.makedirs(out_dir, exist_ok=True)
    n, m = dump.maps.shape[:2]
    for q in range(n):
        for h in range(m):
            write_pgm(os.path.join(out_dir, f"q{q:02d}_h{h}.pgm"), dump.maps[q, h])
        write_pgm(os.path.join(out_dir, f"q{q:02d}_mean.pgm"), dump.mean_maps[q])
    with open(os.path.join(out_dir, "points.txt"), "w", encoding="utf-8", newline="\n") as f:
        for q in range(n):
            for h in range(m):
                x, y = dump.points[q, h]
                f.write(f"{q} {h} {x:.6f} {y:.6f}\n")
    return dump


def best_matching_query(output: DetectionOutput, scene: SceneSample, gt_index: int = 0) -> int:
    """Query matched to ground-truth ``gt_index`` at the final layer."""
    final = output.final
    result = match(final.logits, final.boxes, scene.boxes, scene.labels)
    for q, g in result.pairs:
        if g == gt_index:
            return q
    raise ValueError(f"ground truth {gt_index} is not matched")


def points_inside_box(points: np.ndarray, box_cxcywh) -> np.ndarray:
    cx, cy, w, h = box_cxcywh
    return (
        (points[..., 0] >= cx - w / 2) & (points[..., 0] <= cx + w / 2)
        & (points[..., 1] >= cy - h / 2) & (points[..., 1] <= cy + h / 2)
    )
