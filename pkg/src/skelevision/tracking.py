"""Context cropping, sequential tracker inference and the differentiable
rollout used by the patch attack."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, NumericsError, ShapeError
from .geometry import AnchorSet, Box, generate_anchors, iou, miou
from .model import RESPONSE_SIZE, SEARCH_SIZE, SiamMTL, TEMPLATE_SIZE, TOTAL_STRIDE


def context_sides(box: Box) -> tuple[float, float]:
    """Context window sides (template, detection) for a target box."""
    pad = (box.w + box.h) / 2.0
    s_z = math.sqrt((box.w + pad) * (box.h + pad))
    s_x = s_z * SEARCH_SIZE / TEMPLATE_SIZE
    return s_z, s_x


@dataclass(frozen=True)
class CropWindow:
    """Affine mapping between a square frame window and a resampled patch."""

    cx: float
    cy: float
    side: float
    out_size: int

    def __post_init__(self):
        if self.side <= 0:
            raise ConfigError(f"window side must be positive, got {self.side}")

    @property
    def scale(self) -> float:
        """Patch pixels per frame pixel."""
        return self.out_size / self.side

    def patch_to_frame(self, px: float, py: float) -> tuple[float, float]:
        half = (self.out_size - 1) / 2.0
        return (self.cx + (px - half) / self.scale, self.cy + (py - half) / self.scale)

    def frame_to_patch(self, fx: float, fy: float) -> tuple[float, float]:
        half = (self.out_size - 1) / 2.0
        return (half + (fx - self.cx) * self.scale, half + (fy - self.cy) * self.scale)

    def box_to_patch(self, box: Box) -> Box:
        px, py = self.frame_to_patch(box.cx, box.cy)
        return Box(px, py, box.w * self.scale, box.h * self.scale)

    def box_to_frame(self, box: Box) -> Box:
        fx, fy = self.patch_to_frame(box.cx, box.cy)
        return Box(fx, fy, box.w / self.scale, box.h / self.scale)


def crop_window(
    frame: torch.Tensor,
    cx: float | torch.Tensor,
    cy: float | torch.Tensor,
    side: float | torch.Tensor,
    out_size: int,
) -> tuple[torch.Tensor, CropWindow]:
    """Bilinear crop of a square window into an ``out_size`` patch.

    Out-of-frame regions are filled with the frame's per-channel mean. The
    sampling is differentiable w.r.t. frame pixels and, when tensors are
    passed, w.r.t. the window parameters.
    """
    if frame.dim() != 3 or frame.shape[0] != 3:
        raise ShapeError(f"expected (3, H, W) frame, got {tuple(frame.shape)}")
    h, w = frame.shape[1], frame.shape[2]
    dtype = frame.dtype
    cx_t = torch.as_tensor(cx, dtype=dtype)
    cy_t = torch.as_tensor(cy, dtype=dtype)
    side_t = torch.as_tensor(side, dtype=dtype)
    if float(side_t.detach()) <= 0:
        raise ConfigError("window side must be positive")

    half = (out_size - 1) / 2.0
    idx = torch.arange(out_size, dtype=dtype)
    fx = cx_t + (idx - half) * side_t / out_size  # frame x per patch column
    fy = cy_t + (idx - half) * side_t / out_size
    gx = 2.0 * (fx + 0.5) / w - 1.0
    gy = 2.0 * (fy + 0.5) / h - 1.0
    grid = torch.stack(
        [gx.unsqueeze(0).expand(out_size, -1), gy.unsqueeze(1).expand(-1, out_size)],
        dim=-1,
    ).unsqueeze(0)

    mean = frame.mean(dim=(1, 2))
    centered = frame - mean[:, None, None]
    patch = torch.nn.functional.grid_sample(
        centered.unsqueeze(0), grid, mode="bilinear", padding_mode="zeros", align_corners=False
    )[0] + mean[:, None, None]
    window = CropWindow(
        float(cx_t.detach()), float(cy_t.detach()), float(side_t.detach()), out_size
    )
    return patch, window


def crop_context(
    frame: torch.Tensor, box: Box, role: str = "template"
) -> tuple[torch.Tensor, CropWindow]:
    """Context crop centered on a box: template -> 127 patch, detection -> 255."""
    if role not in ("template", "detection"):
        raise ConfigError(f"unknown crop role {role!r}")
    h, w = frame.shape[1], frame.shape[2]
    x1, y1, x2, y2 = box.to_corners()
    if x2 <= 0 or y2 <= 0 or x1 >= w or y1 >= h:
        raise ConfigError(f"box {box} lies fully outside the {w}x{h} frame")
    s_z, s_x = context_sides(box)
    if role == "template":
        return crop_window(frame, box.cx, box.cy, s_z, TEMPLATE_SIZE)
    return crop_window(frame, box.cx, box.cy, s_x, SEARCH_SIZE)


def default_anchors(num_anchors_ratios: tuple[float, ...] = (0.33, 0.5, 1.0, 2.0, 3.0)) -> AnchorSet:
    return generate_anchors(
        grid_h=RESPONSE_SIZE,
        grid_w=RESPONSE_SIZE,
        stride=TOTAL_STRIDE,
        ratios=num_anchors_ratios,
        base_scale=64.0,
        patch_size=SEARCH_SIZE,
    )


@dataclass
class TrackerConfig:
    anchors: AnchorSet = field(default_factory=default_anchors)
    window_weight: float = 0.4
    # EMA factor blending the decoded size with the previous box size;
    # damps per-frame scale wobble (1.0 = trust the decode fully)
    size_damping: float = 0.25

    def cosine_window(self) -> np.ndarray:
        w = np.hanning(RESPONSE_SIZE)
        return np.outer(w, w)


@dataclass
class TrackerState:
    feat_z: torch.Tensor
    last_box: Box
    frame_size: tuple[int, int]  # (H, W)
    template_count: int = 1


def _as_frame_tensor(frame, dtype=torch.float32) -> torch.Tensor:
    """Accept (H, W, 3) numpy or (3, H, W) torch frames."""
    if isinstance(frame, torch.Tensor):
        return frame
    arr = np.asarray(frame)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeError(f"expected (H, W, 3) frame array, got {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))).to(dtype)


def tracker_init(model: SiamMTL, frame, gt_box: Box, cfg: TrackerConfig) -> TrackerState:
    """Compute template features once; they act as detector parameters."""
    ft = _as_frame_tensor(frame, next(model.parameters()).dtype)
    patch, _ = crop_context(ft, gt_box, "template")
    feat_z = model.features(patch)
    return TrackerState(
        feat_z=feat_z, last_box=gt_box, frame_size=(ft.shape[1], ft.shape[2])
    )


def _foreground_prob(cls: torch.Tensor, m: int) -> torch.Tensor:
    """(2m, H, W) logits -> (m, H, W) foreground probability."""
    per = cls.reshape(m, 2, cls.shape[-2], cls.shape[-1])
    return torch.softmax(per, dim=1)[:, 1]


def tracker_update(
    model: SiamMTL, state: TrackerState, frame, cfg: TrackerConfig
) -> tuple[Box, np.ndarray]:
    """One sequential inference step; updates ``state.last_box`` in place."""
    ft = _as_frame_tensor(frame, next(model.parameters()).dtype)
    _, s_x = context_sides(state.last_box)
    patch, window = crop_window(
        ft, state.last_box.cx, state.last_box.cy, s_x, SEARCH_SIZE
    )
    with torch.no_grad():
        feat_x = model.features(patch)
        cls, reg = model.rpn_forward(state.feat_z, feat_x)
    if torch.isnan(cls).any() or torch.isnan(reg).any():
        raise NumericsError("NaN in RPN outputs; diverged parameters?")
    m = model.cfg.num_anchors
    prob = _foreground_prob(cls[0], m).numpy()  # (m, 17, 17)
    score = prob
    if cfg.window_weight > 0:
        score = prob * (1 - cfg.window_weight) + cfg.cosine_window()[None] * cfg.window_weight
    k, i, j = np.unravel_index(np.argmax(score), score.shape)
    anchor = cfg.anchors.box_at(i, j, k)
    d = reg[0].reshape(m, 4, RESPONSE_SIZE, RESPONSE_SIZE)[k, :, i, j]
    lr = cfg.size_damping
    pred_w = anchor.w * math.exp(float(d[2])) / window.scale
    pred_h = anchor.h * math.exp(float(d[3])) / window.scale
    fx, fy = window.patch_to_frame(
        anchor.cx + float(d[0]) * anchor.w, anchor.cy + float(d[1]) * anchor.h
    )
    h, w = state.frame_size
    pred = Box(
        fx,
        fy,
        lr * pred_w + (1 - lr) * state.last_box.w,
        lr * pred_h + (1 - lr) * state.last_box.h,
    ).clipped(w, h)
    state.last_box = pred
    return pred, score


@dataclass
class TrackResult:
    pred_boxes: list[Box]  # one per update frame (frames 2..n)
    per_frame_iou: list[float]
    miou: float


def track_sequence(
    model: SiamMTL, frames, gt_boxes: list[Box], cfg: TrackerConfig
) -> TrackResult:
    """Init on frame 1 with its gt box, then sequentially update on frames 2..n."""
    if len(frames) < 2:
        raise ShapeError("need at least 2 frames to track")
    if len(frames) != len(gt_boxes):
        raise ShapeError(f"{len(frames)} frames but {len(gt_boxes)} gt boxes")
    state = tracker_init(model, frames[0], gt_boxes[0], cfg)
    preds: list[Box] = []
    ious: list[float] = []
    for frame, gt in zip(frames[1:], gt_boxes[1:]):
        pred, _ = tracker_update(model, state, frame, cfg)
        preds.append(pred)
        ious.append(iou(pred, gt))
    return TrackResult(pred_boxes=preds, per_frame_iou=ious, miou=miou([preds], [gt_boxes[1:]]))


def differentiable_rollout(
    model: SiamMTL,
    frames: list[torch.Tensor],
    gt_boxes: list[Box],
    cfg: TrackerConfig,
    attacked_frames: int | None = None,
    full_unroll: bool = False,
) -> torch.Tensor:
    """Sum of per-frame L1 box losses with a defined gradient w.r.t. frame pixels.

    The argmax anchor index per frame is treated as a constant of
    differentiation. By default the predicted box is detached between frames,
    so gradient flows into later frames only through the pixel path; with
    ``full_unroll`` the crop-center dependence is differentiated too (keep
    sequences short).
    """
    if len(frames) < 2 or len(frames) != len(gt_boxes):
        raise ShapeError("need >= 2 frames with matching gt boxes")
    dtype = frames[0].dtype
    state = tracker_init(model, frames[0], gt_boxes[0], cfg)
    m = model.cfg.num_anchors
    window = cfg.cosine_window()
    h, w = state.frame_size
    last = min(len(frames) - 1, attacked_frames if attacked_frames else len(frames) - 1)

    # current box as tensors so the full-unroll path stays differentiable
    prev = [torch.as_tensor(v, dtype=dtype) for v in gt_boxes[0].to_array()]
    total = torch.zeros((), dtype=dtype)
    for t in range(1, last + 1):
        pad = (prev[2] + prev[3]) / 2.0
        s_z = torch.sqrt((prev[2] + pad) * (prev[3] + pad))
        s_x = s_z * SEARCH_SIZE / TEMPLATE_SIZE
        patch, win = crop_window(frames[t], prev[0], prev[1], s_x, SEARCH_SIZE)
        feat_x = model.features(patch)
        cls, reg = model.rpn_forward(state.feat_z, feat_x)
        if torch.isnan(cls).any() or torch.isnan(reg).any():
            raise NumericsError("NaN in RPN outputs during rollout")
        prob = _foreground_prob(cls[0], m).detach().numpy()
        score = prob
        if cfg.window_weight > 0:
            score = prob * (1 - cfg.window_weight) + window[None] * cfg.window_weight
        k, i, j = np.unravel_index(np.argmax(score), score.shape)
        anchor = cfg.anchors.box_at(i, j, k)
        d = reg[0].reshape(m, 4, RESPONSE_SIZE, RESPONSE_SIZE)[k, :, i, j]
        # decoded box in patch coords, then affine back to frame coords
        scale = SEARCH_SIZE / s_x
        half = (SEARCH_SIZE - 1) / 2.0
        cx = prev[0] + (anchor.cx + d[0] * anchor.w - half) / scale
        cy = prev[1] + (anchor.cy + d[1] * anchor.h - half) / scale
        lr = cfg.size_damping
        bw = lr * anchor.w * torch.exp(d[2]) / scale + (1 - lr) * prev[2]
        bh = lr * anchor.h * torch.exp(d[3]) / scale + (1 - lr) * prev[3]
        gx1, gy1, gx2, gy2 = gt_boxes[t].to_corners()
        gt_t = torch.tensor([gx1, gy1, gx2, gy2], dtype=dtype)
        pred_t = torch.stack([cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2])
        total = total + (pred_t - gt_t).abs().sum()

        if full_unroll:
            nxt = [cx, cy, bw.clamp_min(1.0), bh.clamp_min(1.0)]
        else:
            clipped = Box(
                float(cx.detach()), float(cy.detach()),
                max(float(bw.detach()), 1.0), max(float(bh.detach()), 1.0),
            ).clipped(w, h)
            nxt = [torch.as_tensor(v, dtype=dtype) for v in clipped.to_array()]
        prev = nxt
    return total
