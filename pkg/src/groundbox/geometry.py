"""Axis-aligned boxes, IoU, and the letterbox resize/pad transform."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle in corner form, x1 <= x2 and y1 <= y2."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"box corners out of order: {self}")

    @property
    def w(self) -> float:
        return self.x2 - self.x1

    @property
    def h(self) -> float:
        return self.y2 - self.y1

    @property
    def cx(self) -> float:
        return 0.5 * (self.x1 + self.x2)

    @property
    def cy(self) -> float:
        return 0.5 * (self.y1 + self.y2)

    @property
    def area(self) -> float:
        return self.w * self.h

    @staticmethod
    def from_center(cx: float, cy: float, w: float, h: float) -> "Box":
        return Box(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    def clip(self, width: float, height: float) -> "Box":
        """Clip to the rectangle [0, width] x [0, height]."""
        x1 = min(max(self.x1, 0.0), width)
        x2 = min(max(self.x2, 0.0), width)
        y1 = min(max(self.y1, 0.0), height)
        y2 = min(max(self.y2, 0.0), height)
        return Box(x1, y1, x2, y2)


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes.

    Defined as 0 (with a warning) when both boxes are degenerate, so that
    pathological zero-area annotations never produce NaN downstream.
    """
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(ix, 0.0) * max(iy, 0.0)
    union = a.area + b.area - inter
    if union <= 0.0:
        warnings.warn("IoU of two degenerate boxes; returning 0", RuntimeWarning)
        return 0.0
    return inter / union


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of corner-form box arrays, shapes (N,4) and (M,4) -> (N,M).

    Zero-over-zero unions yield 0, matching iou() without the warning.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0.0, None) * np.clip(iy, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


@dataclass(frozen=True)
class LetterboxTransform:
    """Isotropic scale plus centered padding into a square target frame."""

    scale: float
    pad_x: float
    pad_y: float
    target_size: int

    def apply_box(self, b: Box) -> Box:
        return Box(
            b.x1 * self.scale + self.pad_x,
            b.y1 * self.scale + self.pad_y,
            b.x2 * self.scale + self.pad_x,
            b.y2 * self.scale + self.pad_y,
        )

    def invert_box(self, b: Box) -> Box:
        return Box(
            (b.x1 - self.pad_x) / self.scale,
            (b.y1 - self.pad_y) / self.scale,
            (b.x2 - self.pad_x) / self.scale,
            (b.y2 - self.pad_y) / self.scale,
        )


def letterbox(image_size: tuple[float, float], target: int) -> LetterboxTransform:
    """Transform that resizes the long edge of (w, h) to `target` and centers
    the short edge with padding (floor of the split on the leading side is the
    caller's concern only when rasterizing; box coordinates stay fractional)."""
    w, h = image_size
    if w <= 0 or h <= 0 or target <= 0:
        raise ValueError(f"image size and target must be positive, got {image_size}, {target}")
    scale = target / max(w, h)
    pad_x = (target - w * scale) / 2.0
    pad_y = (target - h * scale) / 2.0
    return LetterboxTransform(scale=scale, pad_x=pad_x, pad_y=pad_y, target_size=target)


def letterbox_raster(raster: np.ndarray, target: int) -> tuple[np.ndarray, LetterboxTransform]:
    """Letterbox an (H, W, C) raster via nearest-neighbor sampling.

    Padding is filled with the raster's per-channel mean. Returns the padded
    square raster and the transform that maps original-frame boxes into it.
    """
    h, w = raster.shape[:2]
    t = letterbox((w, h), target)
    if w == h == target:
        return raster, t
    new_w = max(int(round(w * t.scale)), 1)
    new_h = max(int(round(h * t.scale)), 1)
    src_x = np.clip(((np.arange(new_w) + 0.5) / t.scale).astype(np.int64), 0, w - 1)
    src_y = np.clip(((np.arange(new_h) + 0.5) / t.scale).astype(np.int64), 0, h - 1)
    resized = raster[src_y][:, src_x]
    out = np.empty((target, target, raster.shape[2]), dtype=raster.dtype)
    out[:] = raster.mean(axis=(0, 1))
    ox = int(np.floor(t.pad_x))
    oy = int(np.floor(t.pad_y))
    out[oy : oy + new_h, ox : ox + new_w] = resized
    return out, t
