"""Synthetic shape scenes: rectangles (0), disks (1) and triangles (2)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import box_xyxy_to_cxcywh, pairwise_iou

CLASS_NAMES = ("rectangle", "disk", "triangle")
BACKGROUND = 0.5
NOISE_STD = 0.02
MAX_ATTEMPTS = 1000
MAX_IOU = 0.3


class GenerationError(RuntimeError):
    pass


@dataclass
class SceneSample:
    image: np.ndarray  # 3 x S x S in [0, 1]
    boxes: np.ndarray  # K x 4 normalized cxcywh
    labels: np.ndarray  # K
    seed: int

    @property
    def gts(self) -> list[tuple[np.ndarray, int]]:
        return [(b, int(c)) for b, c in zip(self.boxes, self.labels)]


def _pixel_grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    c = np.arange(size) + 0.5
    return np.meshgrid(c, c)


def rasterize_rectangle(size: int, x1: float, y1: float, x2: float, y2: float) -> np.ndarray:
    px, py = _pixel_grid(size)
    return (px >= x1) & (px < x2) & (py >= y1) & (py < y2)


def rasterize_disk(size: int, cx: float, cy: float, r: float) -> np.ndarray:
    px, py = _pixel_grid(size)
    return (px - cx) ** 2 + (py - cy) ** 2 <= r * r


def rasterize_triangle(size: int, vertices: np.ndarray) -> np.ndarray:
    px, py = _pixel_grid(size)
    (ax, ay), (bx, by), (cx, cy) = vertices

    def edge(x0, y0, x1, y1):
        return (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)

    e0, e1, e2 = edge(ax, ay, bx, by), edge(bx, by, cx, cy), edge(cx, cy, ax, ay)
    return ((e0 >= 0) & (e1 >= 0) & (e2 >= 0)) | ((e0 <= 0) & (e1 <= 0) & (e2 <= 0))


def mask_box(mask: np.ndarray) -> np.ndarray:
    """Tight normalized xyxy bounds of a boolean mask."""
    size = mask.shape[0]
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return np.array([cols[0], rows[0], cols[-1] + 1, rows[-1] + 1], dtype=np.float64) / size


def _draw_object(rng: np.random.Generator, size: int, cls: int) -> np.ndarray:
    lo, hi = 0.16 * size, 0.45 * size
    if cls == 0:
        w, h = rng.uniform(lo, hi, 2)
        x1 = rng.uniform(0, size - w)
        y1 = rng.uniform(0, size - h)
        return rasterize_rectangle(size, x1, y1, x1 + w, y1 + h)
    if cls == 1:
        r = rng.uniform(lo / 2, hi / 2)
        cx, cy = rng.uniform(r, size - r, 2)
        return rasterize_disk(size, cx, cy, r)
    w, h = rng.uniform(lo, hi, 2)
    x1 = rng.uniform(0, size - w)
    y1 = rng.uniform(0, size - h)
    apex = x1 + rng.uniform(0.2, 0.8) * w
    return rasterize_triangle(size, np.array([[x1, y1 + h], [x1 + w, y1 + h], [apex, y1]]))


def _draw_color(rng: np.random.Generator) -> np.ndarray:
    while True:
        color = rng.uniform(0.0, 1.0, 3)
        if np.max(np.abs(color - BACKGROUND)) >= 0.25:
            return color


def generate_scene(seed: int, image_size: int = 64, n_classes: int = 3, max_objects: int = 4) -> SceneSample:
    """Deterministic scene of 1 to ``max_objects`` shapes for ``seed``.

    Shapes are placed by rejection so that no two ground-truth boxes overlap
    with IoU above 0.3; ground-truth boxes are tight bounds of each raster.
    """
    if not 1 <= n_classes <= len(CLASS_NAMES):
        raise ValueError(f"n_classes must be between 1 and {len(CLASS_NAMES)}")
    rng = np.random.default_rng(seed)
    count = int(rng.integers(1, max_objects + 1))
    masks, boxes, labels = [], [], []
    attempts = 0
    while len(masks) < count:
        attempts += 1
        if attempts > MAX_ATTEMPTS:
            raise GenerationError(f"could not place {count} objects for seed {seed}")
        cls = int(rng.integers(0, n_classes))
        mask = _draw_object(rng, image_size, cls)
        if not mask.any():
            continue
        box = box_xyxy_to_cxcywh(mask_box(mask))
        if boxes and np.max(pairwise_iou(box, np.array(boxes))[0]) > MAX_IOU:
            continue
        masks.append(mask)
        boxes.append(box)
        labels.append(cls)
    image = np.full((3, image_size, image_size), BACKGROUND)
    for mask in masks:
        image[:, mask] = _draw_color(rng)[:, None]
    image += rng.normal(0.0, NOISE_STD, image.shape)
    np.clip(image, 0.0, 1.0, out=image)
    return SceneSample(image, np.array(boxes).reshape(-1, 4), np.array(labels, dtype=np.int64), int(seed))


def scene_seed(run_seed: int, split: int, index: int) -> int:
    """Stable 63-bit scene seed for ``(run seed, split, index)``."""
    ss = np.random.SeedSequence([int(run_seed), int(split), int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def make_split(run_seed: int, split: int, count: int, image_size: int = 64, n_classes: int = 3) -> list[SceneSample]:
    return [generate_scene(scene_seed(run_seed, split, i), image_size, n_classes) for i in range(count)]
