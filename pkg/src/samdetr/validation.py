"""Input checks shared by the estimator API."""

from __future__ import annotations

import numpy as np


def check_images(images, image_size: int | None = None) -> np.ndarray:
    """Return ``images`` as a float64 ``B x 3 x S x S`` array with values in [0, 1]."""
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1] != 3 or arr.shape[2] != arr.shape[3]:
        raise ValueError(f"expected images shaped B x 3 x S x S, got {arr.shape}")
    if image_size is not None and arr.shape[2] != image_size:
        raise ValueError(f"expected {image_size} x {image_size} images, got {arr.shape[2]} x {arr.shape[3]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("images contain NaN or infinite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return arr


def check_boxes(boxes) -> np.ndarray:
    """Normalized cxcywh boxes as a ``K x 4`` array; sizes positive, extents inside the image."""
    arr = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if not np.all(np.isfinite(arr)):
        raise ValueError("boxes contain NaN or infinite values")
    if np.any(arr[:, 2:] <= 0):
        raise ValueError("box widths and heights must be positive")
    lo = arr[:, :2] - arr[:, 2:] / 2
    hi = arr[:, :2] + arr[:, 2:] / 2
    if np.any(lo < -1e-9) or np.any(hi > 1 + 1e-9):
        raise ValueError("boxes must lie inside the unit square")
    return arr


def check_labels(labels, n_classes: int, count: int) -> np.ndarray:
    arr = np.asarray(labels).reshape(-1)
    if arr.shape[0] != count:
        raise ValueError(f"{arr.shape[0]} labels for {count} boxes")
    if arr.size and (not np.issubdtype(arr.dtype, np.integer) or arr.min() < 0 or arr.max() >= n_classes):
        raise ValueError(f"labels must be integers in [0, {n_classes})")
    return arr.astype(np.int64)


def check_targets(targets, n_images: int, n_classes: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Validate per-image ``(boxes, labels)`` pairs."""
    targets = list(targets)
    if len(targets) != n_images:
        raise ValueError(f"{len(targets)} targets for {n_images} images")
    out = []
    for i, t in enumerate(targets):
        try:
            boxes, labels = t
        except (TypeError, ValueError) as exc:
            raise ValueError(f"target {i} is not a (boxes, labels) pair") from exc
        boxes = check_boxes(boxes)
        out.append((boxes, check_labels(labels, n_classes, boxes.shape[0])))
    return out


def check_is_fitted(estimator, attribute: str = "model_") -> None:
    if getattr(estimator, attribute, None) is None:
        raise RuntimeError(f"{type(estimator).__name__} is not fitted; call fit first")
