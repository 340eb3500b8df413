"""Anchor target assignment and the tracking / keypoint / combined losses."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, ShapeError
from .geometry import AnchorSet, Box, encode_deltas_array, iou_array

log = logging.getLogger(__name__)

POS_LABEL = 1
NEG_LABEL = -1
IGNORE_LABEL = 0


@dataclass(frozen=True)
class LossWeights:
    lambda_c: float = 1.0
    lambda_r: float = 1.2
    lambda_k: float = 0.0

    def __post_init__(self):
        if self.lambda_c < 0 or self.lambda_r < 0 or self.lambda_k < 0:
            raise ConfigError("loss weights must be nonnegative")


@dataclass
class AnchorTargets:
    """Per-anchor labels (+1 positive / -1 negative / 0 ignore) and regression
    targets for the positives."""

    label: np.ndarray  # (grid_h, grid_w, m) int8
    reg_target: np.ndarray  # (grid_h, grid_w, m, 4) float64
    pos_count: int
    neg_count: int


def assign_anchor_targets(
    anchors: AnchorSet,
    gt: Box,
    pos_thresh: float = 0.6,
    neg_thresh: float = 0.3,
    pos_cap: int = 16,
    neg_cap: int = 48,
    rng: np.random.Generator | None = None,
) -> AnchorTargets:
    """Label anchors by IoU against the gt box.

    Positives are the highest-IoU anchors above ``pos_thresh`` (capped);
    negatives are a seeded random subsample below ``neg_thresh``. If nothing
    clears ``pos_thresh`` the single best anchor is forced positive.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    ious = iou_array(anchors.boxes, gt)  # (grid_h, grid_w, m)
    flat = ious.reshape(-1)
    label = np.full(flat.shape, IGNORE_LABEL, dtype=np.int8)

    pos_idx = np.flatnonzero(flat >= pos_thresh)
    if pos_idx.size == 0:
        pos_idx = np.array([int(np.argmax(flat))])
    elif pos_idx.size > pos_cap:
        order = np.argsort(flat[pos_idx])[::-1]
        pos_idx = pos_idx[order[:pos_cap]]
    label[pos_idx] = POS_LABEL

    neg_idx = np.flatnonzero((flat <= neg_thresh) & (label == IGNORE_LABEL))
    if neg_idx.size > neg_cap:
        neg_idx = rng.choice(neg_idx, size=neg_cap, replace=False)
    label[neg_idx] = NEG_LABEL

    reg_target = encode_deltas_array(anchors.boxes, gt)
    return AnchorTargets(
        label=label.reshape(ious.shape),
        reg_target=reg_target,
        pos_count=int(pos_idx.size),
        neg_count=int(neg_idx.size),
    )


def _split_logits(logits: torch.Tensor, per_anchor: int) -> torch.Tensor:
    """(c*m, H, W) -> (m, c, H, W) with contiguous per-anchor channel blocks."""
    if logits.dim() != 3 or logits.shape[0] % per_anchor != 0:
        raise ShapeError(f"expected ({per_anchor}m, H, W) logits, got {tuple(logits.shape)}")
    m = logits.shape[0] // per_anchor
    return logits.reshape(m, per_anchor, logits.shape[1], logits.shape[2])


def cls_loss(cls_logits: torch.Tensor, targets: AnchorTargets) -> torch.Tensor:
    """Mean two-class cross entropy over non-ignored anchors.

    ``cls_logits`` is (2m, H, W); each anchor's block is (background, foreground).
    """
    per = _split_logits(cls_logits, 2)  # (m, 2, H, W)
    label = torch.from_numpy(targets.label).to(per.device)  # (H, W, m)
    label = label.permute(2, 0, 1)  # (m, H, W)
    keep = label != IGNORE_LABEL
    if not bool(keep.any()):
        raise ShapeError("no non-ignored anchors for classification loss")
    logits = per.permute(0, 2, 3, 1)[keep]  # (n, 2)
    classes = (label[keep] == POS_LABEL).long()
    return F.cross_entropy(logits, classes)


def smooth_l1(u: torch.Tensor) -> torch.Tensor:
    absu = u.abs()
    return torch.where(absu < 1, 0.5 * u * u, absu - 0.5)


def reg_loss(reg_deltas: torch.Tensor, targets: AnchorTargets) -> torch.Tensor:
    """Mean over positive anchors of component-summed smooth-L1 error.

    ``reg_deltas`` is (4m, H, W).
    """
    per = _split_logits(reg_deltas, 4)  # (m, 4, H, W)
    label = torch.from_numpy(targets.label).to(per.device).permute(2, 0, 1)  # (m, H, W)
    pos = label == POS_LABEL
    if not bool(pos.any()):
        return per.sum() * 0.0
    pred = per.permute(0, 2, 3, 1)[pos]  # (n, 4)
    tgt = torch.from_numpy(targets.reg_target).to(pred.dtype).permute(2, 0, 1, 3)[pos.cpu()]
    return smooth_l1(pred - tgt.to(pred.device)).sum(dim=1).mean()


def trk_loss(
    cls_logits: torch.Tensor,
    reg_deltas: torch.Tensor,
    targets: AnchorTargets,
    weights: LossWeights,
) -> torch.Tensor:
    """Weighted tracking loss: lambda_c * cls + lambda_r * reg."""
    return weights.lambda_c * cls_loss(cls_logits, targets) + weights.lambda_r * reg_loss(
        reg_deltas, targets
    )


@dataclass
class KeypointTarget:
    target_map: np.ndarray  # (K, size, size) float32 in {0, 1}
    visibility: np.ndarray  # (K,) uint8


def make_keypoint_target(
    keypoints: np.ndarray, size: int = 127, radius: int = 2
) -> KeypointTarget:
    """Stamp a disk of ones per visible keypoint; fully out-of-frame keypoints
    have their visibility forced to 0.

    ``keypoints`` is (K, 3) rows of (x, y, visibility) in patch pixel space.
    """
    keypoints = np.asarray(keypoints, dtype=np.float64)
    if keypoints.ndim != 2 or keypoints.shape[1] != 3:
        raise ShapeError(f"expected (K, 3) keypoints, got {keypoints.shape}")
    k = keypoints.shape[0]
    target = np.zeros((k, size, size), dtype=np.float32)
    vis = np.zeros(k, dtype=np.uint8)
    yy, xx = np.mgrid[0:size, 0:size]
    for i, (x, y, v) in enumerate(keypoints):
        if v <= 0:
            continue
        disk = (xx - x) ** 2 + (yy - y) ** 2 <= radius**2
        if not disk.any():
            continue  # clipped away entirely
        target[i][disk] = 1.0
        vis[i] = 1
    return KeypointTarget(target_map=target, visibility=vis)


def kpt_loss(logits: torch.Tensor, target: KeypointTarget) -> torch.Tensor:
    """Per-pixel BCE averaged over visible channels; invisible channels
    contribute exactly zero loss and gradient."""
    if logits.dim() == 4:
        logits = logits.squeeze(0)
    if logits.shape[0] != target.target_map.shape[0]:
        raise ShapeError(
            f"channel mismatch: {logits.shape[0]} logits vs {target.target_map.shape[0]} targets"
        )
    vis = target.visibility.astype(bool)
    if not vis.any():
        log.warning("all keypoint channels invisible; keypoint loss is 0")
        return logits.sum() * 0.0
    idx = torch.from_numpy(np.flatnonzero(vis)).to(logits.device)
    sel = logits.index_select(0, idx)
    tgt = torch.from_numpy(target.target_map[vis]).to(sel.dtype).to(sel.device)
    return F.binary_cross_entropy_with_logits(sel, tgt)


def mtl_loss(
    cls_logits: torch.Tensor,
    reg_deltas: torch.Tensor,
    targets: AnchorTargets,
    weights: LossWeights,
    kpt_logits: torch.Tensor | None = None,
    kpt_target: KeypointTarget | None = None,
) -> torch.Tensor:
    """Tracking loss plus lambda_k-weighted keypoint loss.

    With lambda_k == 0 the keypoint term is skipped entirely, so the result is
    bitwise equal to the tracking loss.
    """
    total = trk_loss(cls_logits, reg_deltas, targets, weights)
    if weights.lambda_k > 0:
        if kpt_logits is None or kpt_target is None:
            raise ConfigError("lambda_k > 0 requires keypoint logits and target")
        total = total + weights.lambda_k * kpt_loss(kpt_logits, kpt_target)
    return total
