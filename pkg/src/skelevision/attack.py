"""Physically-realizable static background patch attack.

The patch texture is shared across frames; per-frame boolean masks record
where it is visible (not occluded by the subject). The attack performs
gradient ascent on the summed L1 box loss of a differentiable tracking
rollout, updating only the texture.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
import torch

from .errors import ConfigError, NumericsError, ShapeError
from .geometry import Box
from .tracking import TrackerConfig, differentiable_rollout, track_sequence


@dataclass
class PatchSpec:
    """Static patch region, per-frame visibility masks and the texture."""

    region: Box  # frame coordinates, static across frames
    masks: np.ndarray  # (T, H, W) bool, True where the patch pixel is visible
    texture: np.ndarray  # (rh, rw, 3) float in [0, 1]
    first_frame_clean: bool = True

    def __post_init__(self):
        if self.masks.ndim != 3 or self.masks.dtype != bool:
            raise ShapeError(f"masks must be (T, H, W) bool, got {self.masks.shape}")
        ry, rx = self.region_slices()
        rh, rw = ry.stop - ry.start, rx.stop - rx.start
        if self.texture.shape != (rh, rw, 3):
            raise ShapeError(
                f"texture shape {self.texture.shape} does not match region {rh}x{rw}x3"
            )
        outside = self.masks.copy()
        outside[:, ry, rx] = False
        if outside.any():
            raise ShapeError("masks must be False everywhere outside the region")
        if self.first_frame_clean and self.masks[0].any():
            raise ShapeError("first_frame_clean requires an all-False first-frame mask")
        if self.texture.min() < 0 or self.texture.max() > 1:
            raise ConfigError("texture values must lie in [0, 1]")

    def region_slices(self) -> tuple[slice, slice]:
        """Integer pixel rows/cols covered by the region."""
        x1, y1, x2, y2 = self.region.to_corners()
        return (
            slice(int(round(y1)), int(round(y2))),
            slice(int(round(x1)), int(round(x2))),
        )


@dataclass
class AttackConfig:
    delta: float = 0.1
    steps: int = 50
    attacked_frames: int = 100

    def __post_init__(self):
        if self.delta <= 0:
            raise ConfigError("step size delta must be positive")
        if self.steps < 1:
            raise ConfigError("need at least 1 attack step")


def composite(frames: np.ndarray, spec: PatchSpec, texture=None) -> list[torch.Tensor]:
    """Overlay the texture wherever masks are True; other pixels are untouched.

    ``frames`` is (T, H, W, 3) float. ``texture`` may be a torch tensor with
    requires_grad, in which case gradient flows into it through the masked
    pixels. Returns per-frame (3, H, W) tensors.
    """
    if frames.ndim != 4 or frames.shape[3] != 3:
        raise ShapeError(f"expected (T, H, W, 3) frames, got {frames.shape}")
    if spec.masks.shape != frames.shape[:3]:
        raise ShapeError(
            f"mask shape {spec.masks.shape} does not match frames {frames.shape[:3]}"
        )
    if texture is None:
        texture = torch.from_numpy(spec.texture)
    dtype = texture.dtype
    ry, rx = spec.region_slices()
    out = []
    for t in range(frames.shape[0]):
        frame = torch.from_numpy(np.ascontiguousarray(frames[t].transpose(2, 0, 1))).to(dtype)
        mask = spec.masks[t][ry, rx]
        if mask.any():
            mask_t = torch.from_numpy(mask).to(dtype)
            patch_bg = frame[:, ry, rx]
            blended = patch_bg * (1 - mask_t) + texture.permute(2, 0, 1) * mask_t
            frame = frame.clone()
            frame[:, ry, rx] = blended
        out.append(frame)
    return out


def adv_task_loss(pred, gt) -> torch.Tensor:
    """L1 distance between predicted and ground-truth corner coordinates."""
    pred_t = pred if isinstance(pred, torch.Tensor) else torch.tensor(pred.to_corners())
    gt_t = gt if isinstance(gt, torch.Tensor) else torch.tensor(gt.to_corners())
    return (pred_t - gt_t.to(pred_t.dtype)).abs().sum()


def build_overlay_spec(
    frames: np.ndarray,
    gt_boxes: list[Box],
    margin: float = 0.1,
    pad: float = 25.0,
    texture: np.ndarray | None = None,
) -> PatchSpec:
    """Construct the overlay scenario: a static background patch inset by a
    10% margin per edge (64% of the frame area), uncovering the gt box plus a
    25 px padding on each side every frame. The first frame stays clean."""
    t, h, w = frames.shape[:3]
    if h < 50 or w < 50:
        raise ConfigError(f"frame size {w}x{h} too small for the overlay construction")
    if len(gt_boxes) != t:
        raise ShapeError(f"{t} frames but {len(gt_boxes)} gt boxes")
    region = Box.from_corners(margin * w, margin * h, (1 - margin) * w, (1 - margin) * h)
    ry = slice(int(round(margin * h)), int(round((1 - margin) * h)))
    rx = slice(int(round(margin * w)), int(round((1 - margin) * w)))
    masks = np.zeros((t, h, w), dtype=bool)
    for i, gt in enumerate(gt_boxes):
        if i == 0:
            continue
        masks[i, ry, rx] = True
        x1, y1, x2, y2 = gt.to_corners()
        ux = slice(max(int(round(x1 - pad)), 0), max(int(round(x2 + pad)), 0))
        uy = slice(max(int(round(y1 - pad)), 0), max(int(round(y2 + pad)), 0))
        masks[i, uy, ux] = False
    if texture is None:
        texture = frames[0, ry, rx].astype(np.float64).copy()
    return PatchSpec(region=region, masks=masks, texture=texture)


def composited_miou(
    model,
    frames: np.ndarray,
    gt_boxes: list[Box],
    spec: PatchSpec,
    texture,
    tracker_cfg: TrackerConfig,
) -> tuple[float, list[float]]:
    """Tracking mIoU (and per-frame IoUs) on the texture-composited sequence."""
    if not isinstance(texture, torch.Tensor):
        texture = torch.from_numpy(np.asarray(texture, dtype=np.float64))
    with torch.no_grad():
        comp = composite(frames, spec, texture)
    comp_np = [f.permute(1, 2, 0).numpy() for f in comp]
    res = track_sequence(model, comp_np, gt_boxes, tracker_cfg)
    return res.miou, res.per_frame_iou


@dataclass
class AttackResult:
    texture: np.ndarray
    benign_miou: float
    adv_miou: float
    loss_trace: list[float]
    per_frame_iou: list[float] = field(default_factory=list)
    snapshots: dict[int, np.ndarray] = field(default_factory=dict)


def run_patch_attack(
    model,
    frames: np.ndarray,
    gt_boxes: list[Box],
    spec: PatchSpec,
    cfg: AttackConfig,
    tracker_cfg: TrackerConfig | None = None,
    snapshot_steps: tuple[int, ...] = (),
    dtype: torch.dtype = torch.float32,
) -> AttackResult:
    """Iterative gradient ascent on the static background texture.

    Each iteration re-runs the full sequential rollout on the composited
    sequence and takes the gradient of the summed per-frame L1 box loss
    w.r.t. the texture. The step normalizes the gradient by its largest
    magnitude, so ``delta`` is the per-iteration bound on how far any texture
    pixel moves in [0, 1]; raw-gradient steps are orders of magnitude too
    small against a trained tracker. Texture is clipped to [0, 1] after every
    step.
    """
    if tracker_cfg is None:
        tracker_cfg = TrackerConfig(window_weight=0.0)
    attacked = min(cfg.attacked_frames, frames.shape[0] - 1)
    if not spec.masks[: attacked + 1].any():
        raise ConfigError("attack has zero mask coverage over the attacked frames")

    texture = torch.from_numpy(spec.texture.astype(np.float64)).to(dtype)
    texture.requires_grad_(True)

    def eval_miou(tex: torch.Tensor):
        return composited_miou(model, frames, gt_boxes, spec, tex, tracker_cfg)

    benign_miou, _ = eval_miou(texture.detach())

    trace: list[float] = []
    snapshots: dict[int, np.ndarray] = {}
    for step in range(1, cfg.steps + 1):
        if texture.grad is not None:
            texture.grad = None
        comp = composite(frames, spec, texture)
        loss = differentiable_rollout(
            model, comp, gt_boxes, tracker_cfg, attacked_frames=attacked
        )
        loss.backward()
        grad = texture.grad
        if grad is None:
            grad = torch.zeros_like(texture)
        if torch.isnan(grad).any():
            raise NumericsError(f"NaN texture gradient at attack step {step}")
        trace.append(float(loss.detach()))
        with torch.no_grad():
            texture += cfg.delta * grad / grad.abs().max().clamp_min(1e-12)
            texture.clamp_(0.0, 1.0)
        if step in snapshot_steps:
            snapshots[step] = texture.detach().numpy().copy()

    adv_miou, per_frame = eval_miou(texture.detach())
    return AttackResult(
        texture=texture.detach().numpy(),
        benign_miou=benign_miou,
        adv_miou=adv_miou,
        loss_trace=trace,
        per_frame_iou=per_frame,
        snapshots=snapshots,
    )


def save_texture(path: str | Path, texture: np.ndarray, meta: dict) -> None:
    """Lossless PNG export plus a JSON sidecar with attack metadata."""
    path = Path(path)
    img = np.clip(np.rint(texture * 255.0), 0, 255).astype(np.uint8)
    cv2.imwrite(str(path), cv2.cvtColor(img, cv2.COLOR_RGB2BGR))
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_texture(path: str | Path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise ConfigError(f"cannot read texture image {path}")
    texture = cv2.cvtColor(img, cv2.COLOR_BGR2RGB).astype(np.float64) / 255.0
    meta = json.loads(path.with_suffix(".json").read_text())
    return texture, meta
