"""Boxes, IoU/mIoU metrics, anchor grids and box-delta coding.

Everything here is plain numpy / Python floats; the differentiable decode
used inside the tracker lives in :mod:`skelevision.tracking`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in center/size form, pixel units."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ConfigError(f"box sides must be positive, got w={self.w}, h={self.h}")

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "Box":
        return cls((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)

    def to_corners(self) -> tuple[float, float, float, float]:
        return (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )

    @property
    def area(self) -> float:
        return self.w * self.h

    def to_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    def clipped(self, width: float, height: float, min_side: float = 1.0) -> "Box":
        """Clip corners to the frame rect, keeping at least ``min_side`` pixels."""
        x1, y1, x2, y2 = self.to_corners()
        x1 = min(max(x1, 0.0), width - min_side)
        y1 = min(max(y1, 0.0), height - min_side)
        x2 = min(max(x2, x1 + min_side), float(width))
        y2 = min(max(y2, y1 + min_side), float(height))
        return Box.from_corners(x1, y1, x2, y2)


def iou(a: Box, b: Box) -> float:
    """Intersection-over-union of two boxes; 0 when disjoint."""
    ax1, ay1, ax2, ay2 = a.to_corners()
    bx1, by1, bx2, by2 = b.to_corners()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    # areas from the same corner values so inter <= min(area) holds exactly
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)
    return inter / (area_a + area_b - inter)


def miou(pred: Sequence[Sequence[Box]], gt: Sequence[Sequence[Box]]) -> float:
    """Two-level mean IoU: per-frame mean within a sequence, then across sequences."""
    if len(pred) != len(gt) or len(pred) == 0:
        raise ShapeError(f"need matching, nonempty sequence lists: {len(pred)} vs {len(gt)}")
    seq_means = []
    for p_seq, g_seq in zip(pred, gt):
        if len(p_seq) != len(g_seq) or len(p_seq) == 0:
            raise ShapeError(f"per-sequence box counts differ: {len(p_seq)} vs {len(g_seq)}")
        seq_means.append(sum(iou(p, g) for p, g in zip(p_seq, g_seq)) / len(p_seq))
    return float(sum(seq_means) / len(seq_means))


@dataclass(frozen=True)
class Deltas:
    """Box regression offsets relative to an anchor (Faster-R-CNN convention)."""

    dx: float
    dy: float
    dw: float
    dh: float

    def to_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dw, self.dh], dtype=np.float64)


def encode_deltas(anchor: Box, gt: Box) -> Deltas:
    return Deltas(
        dx=(gt.cx - anchor.cx) / anchor.w,
        dy=(gt.cy - anchor.cy) / anchor.h,
        dw=math.log(gt.w / anchor.w),
        dh=math.log(gt.h / anchor.h),
    )


def decode_deltas(anchor: Box, d: Deltas) -> Box:
    return Box(
        cx=anchor.cx + d.dx * anchor.w,
        cy=anchor.cy + d.dy * anchor.h,
        w=anchor.w * math.exp(d.dw),
        h=anchor.h * math.exp(d.dh),
    )


@dataclass(frozen=True)
class AnchorSet:
    """Dense anchor grid in detection-patch coordinates.

    ``boxes`` has shape (grid_h, grid_w, m, 4) in (cx, cy, w, h) order.
    """

    grid_h: int
    grid_w: int
    stride: float
    ratios: tuple[float, ...]
    base_scale: float
    patch_size: int
    boxes: np.ndarray = field(repr=False)

    @property
    def num_ratios(self) -> int:
        return len(self.ratios)

    @property
    def num_anchors(self) -> int:
        return self.grid_h * self.grid_w * self.num_ratios

    def flat(self) -> np.ndarray:
        """(N, 4) view over all anchors, row-major over (row, col, ratio)."""
        return self.boxes.reshape(-1, 4)

    def box_at(self, row: int, col: int, k: int) -> Box:
        cx, cy, w, h = self.boxes[row, col, k]
        return Box(float(cx), float(cy), float(w), float(h))


def generate_anchors(
    grid_h: int,
    grid_w: int,
    stride: float,
    ratios: Sequence[float],
    base_scale: float,
    patch_size: int = 255,
) -> AnchorSet:
    """Tile m = len(ratios) equal-area anchors on a stride lattice centered in the patch.

    For aspect ratio r, w = base_scale / sqrt(r) and h = base_scale * sqrt(r),
    so all ratios share the same area.
    """
    if stride <= 0 or base_scale <= 0:
        raise ConfigError(f"stride and base_scale must be positive, got {stride}, {base_scale}")
    if not ratios:
        raise ConfigError("ratios must be nonempty")
    center = (patch_size - 1) / 2.0
    ys = center + (np.arange(grid_h) - (grid_h - 1) / 2.0) * stride
    xs = center + (np.arange(grid_w) - (grid_w - 1) / 2.0) * stride
    sq = np.sqrt(np.asarray(ratios, dtype=np.float64))
    ws = base_scale / sq
    hs = base_scale * sq
    boxes = np.empty((grid_h, grid_w, len(ratios), 4), dtype=np.float64)
    boxes[..., 0] = xs[None, :, None]
    boxes[..., 1] = ys[:, None, None]
    boxes[..., 2] = ws[None, None, :]
    boxes[..., 3] = hs[None, None, :]
    return AnchorSet(
        grid_h=grid_h,
        grid_w=grid_w,
        stride=float(stride),
        ratios=tuple(float(r) for r in ratios),
        base_scale=float(base_scale),
        patch_size=int(patch_size),
        boxes=boxes,
    )


def iou_array(anchors: np.ndarray, box: Box) -> np.ndarray:
    """Vectorized IoU of (..., 4) cxcywh anchors against one box."""
    ax1 = anchors[..., 0] - anchors[..., 2] / 2.0
    ay1 = anchors[..., 1] - anchors[..., 3] / 2.0
    ax2 = anchors[..., 0] + anchors[..., 2] / 2.0
    ay2 = anchors[..., 1] + anchors[..., 3] / 2.0
    bx1, by1, bx2, by2 = box.to_corners()
    iw = np.minimum(ax2, bx2) - np.maximum(ax1, bx1)
    ih = np.minimum(ay2, by2) - np.maximum(ay1, by1)
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = anchors[..., 2] * anchors[..., 3] + box.area - inter
    return inter / union


def encode_deltas_array(anchors: np.ndarray, gt: Box) -> np.ndarray:
    """Vectorized encode of one gt box against (..., 4) cxcywh anchors."""
    out = np.empty_like(anchors)
    out[..., 0] = (gt.cx - anchors[..., 0]) / anchors[..., 2]
    out[..., 1] = (gt.cy - anchors[..., 1]) / anchors[..., 3]
    out[..., 2] = np.log(gt.w / anchors[..., 2])
    out[..., 3] = np.log(gt.h / anchors[..., 3])
    return out
