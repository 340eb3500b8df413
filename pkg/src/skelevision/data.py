"""Dataset ingestion and the synthetic desk-scale sprite generator.

Two kinds of sources feed training:
  * keypoint-annotated single images (COCO person-keypoints schema), where
    template/detection pairs come from augmenting the same image;
  * video sequences stored as a directory of frames plus a ground-truth box
    file (one ``x1,y1,x2,y2`` line per frame).

The synthetic generator renders articulated stick-figure sprites on textured
backgrounds and persists them in exactly the same layout, so every downstream
path is exercised identically.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
import torch

from .errors import ConfigError, DataError
from .geometry import Box
from .tracking import context_sides, crop_window
from .model import SEARCH_SIZE, TEMPLATE_SIZE

log = logging.getLogger(__name__)

NUM_KEYPOINTS = 17


@dataclass
class AugmentConfig:
    max_shift: float = 16.0
    scale_jitter: tuple[float, float] = (0.95, 1.05)
    color_jitter: float = 0.05


@dataclass
class TrainSample:
    template: np.ndarray  # (127, 127, 3) float32
    template_box: Box  # template-patch coordinates
    keypoints: np.ndarray | None  # (17, 3) in template-patch coordinates, or None
    detection: np.ndarray  # (255, 255, 3) float32
    detection_box: Box  # detection-patch coordinates


@dataclass
class SequenceRecord:
    name: str
    frame_paths: list[Path]
    gt_boxes: list[Box]
    split: str  # train | val | test


@dataclass
class StillRecord:
    image_path: Path
    bbox: Box
    keypoints: np.ndarray  # (17, 3) raw, v in {0, 1, 2}


def load_frame(path: str | Path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise DataError(f"cannot read image {path}")
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB).astype(np.float32) / 255.0


def save_frame(path: str | Path, frame: np.ndarray) -> None:
    img = np.clip(np.rint(frame * 255.0), 0, 255).astype(np.uint8)
    cv2.imwrite(str(path), cv2.cvtColor(img, cv2.COLOR_RGB2BGR))


def _crop_patch(image: np.ndarray, cx: float, cy: float, side: float, out: int):
    ft = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).to(torch.float32)
    patch, window = crop_window(ft, cx, cy, side, out)
    return patch.permute(1, 2, 0).numpy(), window


def make_still_pair(
    image: np.ndarray,
    bbox: Box,
    keypoints: np.ndarray | None,
    aug: AugmentConfig,
    rng: np.random.Generator,
) -> TrainSample:
    """Template from the unmodified image; detection from an augmented copy."""
    s_z, s_x = context_sides(bbox)
    template, win_z = _crop_patch(image, bbox.cx, bbox.cy, s_z, TEMPLATE_SIZE)

    detection_img = image
    if aug.color_jitter > 0:
        gain = 1.0 + rng.uniform(-aug.color_jitter, aug.color_jitter, size=3)
        detection_img = np.clip(image * gain[None, None, :], 0.0, 1.0).astype(np.float32)
    dx, dy = rng.uniform(-aug.max_shift, aug.max_shift, size=2) if aug.max_shift > 0 else (0.0, 0.0)
    scale = rng.uniform(*aug.scale_jitter) if aug.scale_jitter != (1.0, 1.0) else 1.0
    detection, win_x = _crop_patch(
        detection_img, bbox.cx + dx, bbox.cy + dy, s_x * scale, SEARCH_SIZE
    )

    kps = None
    if keypoints is not None:
        kps = np.zeros((keypoints.shape[0], 3), dtype=np.float64)
        for i, (x, y, v) in enumerate(keypoints):
            px, py = win_z.frame_to_patch(x, y)
            visible = v >= 1 and 0 <= px < TEMPLATE_SIZE and 0 <= py < TEMPLATE_SIZE
            kps[i] = (px, py, 1.0 if visible else 0.0)
    return TrainSample(
        template=template,
        template_box=win_z.box_to_patch(bbox),
        keypoints=kps,
        detection=detection,
        detection_box=win_x.box_to_patch(bbox),
    )


def make_video_pair(
    template_frame: np.ndarray,
    template_box: Box,
    detection_frame: np.ndarray,
    detection_box: Box,
    aug: AugmentConfig,
    rng: np.random.Generator,
) -> TrainSample:
    """Tracking pair from two frames of the same sequence (no keypoints)."""
    s_z, _ = context_sides(template_box)
    template, win_z = _crop_patch(
        template_frame, template_box.cx, template_box.cy, s_z, TEMPLATE_SIZE
    )
    _, s_x = context_sides(detection_box)
    dx, dy = rng.uniform(-aug.max_shift, aug.max_shift, size=2) if aug.max_shift > 0 else (0.0, 0.0)
    scale = rng.uniform(*aug.scale_jitter) if aug.scale_jitter != (1.0, 1.0) else 1.0
    detection, win_x = _crop_patch(
        detection_frame, detection_box.cx + dx, detection_box.cy + dy, s_x * scale, SEARCH_SIZE
    )
    return TrainSample(
        template=template,
        template_box=win_z.box_to_patch(template_box),
        keypoints=None,
        detection=detection,
        detection_box=win_x.box_to_patch(detection_box),
    )


def parse_keypoint_annotations(ann_path: str | Path, image_root: str | Path) -> list[StillRecord]:
    """Parse the documented COCO person-keypoints subset."""
    ann_path = Path(ann_path)
    image_root = Path(image_root)
    try:
        doc = json.loads(ann_path.read_text())
        images = {img["id"]: img["file_name"] for img in doc["images"]}
        annotations = doc["annotations"]
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise DataError(f"malformed annotation file {ann_path}: {exc}") from exc

    records: list[StillRecord] = []
    skipped = 0
    for ann in annotations:
        if ann.get("iscrowd", 0):
            continue
        try:
            image_id = ann["image_id"]
            x, y, w, h = ann["bbox"]
            flat = ann["keypoints"]
        except (KeyError, ValueError) as exc:
            raise DataError(f"malformed annotation entry in {ann_path}: {exc}") from exc
        if len(flat) != NUM_KEYPOINTS * 3:
            raise DataError(f"expected {NUM_KEYPOINTS * 3} keypoint values, got {len(flat)}")
        path = image_root / images[image_id]
        if not path.exists():
            skipped += 1
            continue
        if w <= 0 or h <= 0:
            continue
        records.append(
            StillRecord(
                image_path=path,
                bbox=Box(x + w / 2.0, y + h / 2.0, w, h),
                keypoints=np.asarray(flat, dtype=np.float64).reshape(NUM_KEYPOINTS, 3),
            )
        )
    if skipped:
        log.warning("skipped %d annotations with missing image files", skipped)
    return records


def ingest_keypoint_images(
    ann_path: str | Path,
    image_root: str | Path,
    aug: AugmentConfig | None = None,
    seed: int = 0,
):
    """Stream augmented template/detection TrainSamples from still images."""
    aug = aug or AugmentConfig()
    rng = np.random.default_rng(seed)
    for rec in parse_keypoint_annotations(ann_path, image_root):
        image = load_frame(rec.image_path)
        yield make_still_pair(image, rec.bbox, rec.keypoints, aug, rng)


def read_groundtruth(path: str | Path) -> list[Box]:
    boxes = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 4:
            raise DataError(f"{path}:{lineno}: expected 4 corner values, got {line!r}")
        x1, y1, x2, y2 = map(float, parts)
        boxes.append(Box.from_corners(x1, y1, x2, y2))
    return boxes


TRAIN_FRAMES_CAP = 800
VAL_FRAMES_CAP = 100


def ingest_sequences(root: str | Path) -> list[SequenceRecord]:
    """Scan ``<root>/sequences/*/`` folders into train/val SequenceRecords.

    Sequences of >= 900 frames contribute the first 800 frames to train and
    the next 100 to val; shorter ones are split 8:1 proportionally.
    """
    root = Path(root)
    seq_root = root / "sequences" if (root / "sequences").is_dir() else root
    records: list[SequenceRecord] = []
    for seq_dir in sorted(p for p in seq_root.iterdir() if p.is_dir()):
        frame_paths = sorted((seq_dir / "img").glob("*.png"))
        if not frame_paths:
            continue
        gt_path = seq_dir / "groundtruth.txt"
        if not gt_path.exists():
            raise DataError(f"{seq_dir}: missing groundtruth.txt")
        boxes = read_groundtruth(gt_path)
        if len(boxes) != len(frame_paths):
            raise DataError(
                f"{seq_dir}: {len(frame_paths)} frames but {len(boxes)} gt lines"
            )
        n = len(frame_paths)
        if n >= TRAIN_FRAMES_CAP + VAL_FRAMES_CAP:
            n_train, n_val = TRAIN_FRAMES_CAP, VAL_FRAMES_CAP
        else:
            n_train = int(round(n * 8 / 9))
            n_val = n - n_train
        records.append(
            SequenceRecord(seq_dir.name, frame_paths[:n_train], boxes[:n_train], "train")
        )
        if n_val > 0:
            records.append(
                SequenceRecord(
                    seq_dir.name,
                    frame_paths[n_train : n_train + n_val],
                    boxes[n_train : n_train + n_val],
                    "val",
                )
            )
    return records


# ---------------------------------------------------------------------------
# Synthetic sprite dataset
# ---------------------------------------------------------------------------

# COCO keypoint order
KEYPOINT_NAMES = (
    "nose", "left_eye", "right_eye", "left_ear", "right_ear",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
)


def _sprite_keypoints(cx: float, cy: float, u: float, phase: float) -> np.ndarray:
    """Deterministic 17-keypoint stick-figure layout; ears are unused (v=0)."""
    swing = math.sin(phase)
    kps = np.zeros((NUM_KEYPOINTS, 3), dtype=np.float64)

    def put(i, x, y, v=2.0):
        kps[i] = (cx + x * u, cy + y * u, v)

    put(0, 0.0, -2.0)  # nose (head center)
    put(1, -0.15, -2.1)
    put(2, 0.15, -2.1)
    put(3, 0.0, 0.0, v=0.0)  # ears unused
    put(4, 0.0, 0.0, v=0.0)
    put(5, -0.35, -1.3)  # shoulders
    put(6, 0.35, -1.3)
    put(7, -0.7 - 0.2 * swing, -0.7)  # elbows
    put(8, 0.7 + 0.2 * swing, -0.7)
    put(9, -0.9 - 0.3 * swing, -0.1)  # wrists
    put(10, 0.9 + 0.3 * swing, -0.1)
    put(11, -0.25, 0.3)  # hips
    put(12, 0.25, 0.3)
    put(13, -0.4 - 0.3 * swing, 1.2)  # knees
    put(14, 0.4 + 0.3 * swing, 1.2)
    put(15, -0.5 - 0.4 * swing, 2.0)  # ankles
    put(16, 0.5 + 0.4 * swing, 2.0)
    return kps


_SKELETON_EDGES = (
    (5, 6), (5, 11), (6, 12), (11, 12),  # torso
    (5, 7), (7, 9), (6, 8), (8, 10),  # arms
    (11, 13), (13, 15), (12, 14), (14, 16),  # legs
)


def _render_sprite(shape: tuple[int, int], kps: np.ndarray, u: float) -> np.ndarray:
    """Binary sprite mask: head disk + limb segments."""
    mask = np.zeros(shape, dtype=np.uint8)
    thickness = max(2, int(round(0.3 * u)))
    head = kps[0]
    cv2.circle(mask, (int(round(head[0])), int(round(head[1]))), max(2, int(round(0.5 * u))), 1, -1)
    for a, b in _SKELETON_EDGES:
        pa = (int(round(kps[a][0])), int(round(kps[a][1])))
        pb = (int(round(kps[b][0])), int(round(kps[b][1])))
        cv2.line(mask, pa, pb, 1, thickness)
    return mask.astype(bool)


def _textured_background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    coarse = rng.uniform(0.25, 0.75, size=(6, 6, 3)).astype(np.float32)
    return cv2.resize(coarse, (w, h), interpolation=cv2.INTER_CUBIC).clip(0.0, 1.0)


def _sprite_mask_bbox(mask: np.ndarray) -> Box:
    ys, xs = np.nonzero(mask)
    return Box.from_corners(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


@dataclass
class SynthSummary:
    root: Path
    sequence_dirs: list[Path] = field(default_factory=list)
    n_stills: int = 0


def synth_sprite_dataset(
    out_dir: str | Path,
    seed: int,
    n_sequences: int = 8,
    frames_per_seq: int = 30,
    frame_size: int = 160,
    n_stills: int = 40,
    patch_margin: float = 0.1,
) -> SynthSummary:
    """Render and persist a deterministic sprite dataset.

    Each sequence is an articulated stick figure walking over a static
    textured background along a smooth random walk. Ground-truth boxes are the
    exact bounding boxes of the rendered sprite pixels. A background patch
    region (frame rect inset by ``patch_margin`` per edge) is reserved per
    sequence with per-frame visibility masks that exclude sprite pixels; the
    first frame's mask is all-False.
    """
    if frame_size < 64:
        raise ConfigError("frame_size must be >= 64")
    root = Path(out_dir)
    rng = np.random.default_rng(seed)
    summary = SynthSummary(root=root)

    seq_root = root / "sequences"
    seq_root.mkdir(parents=True, exist_ok=True)
    h = w = frame_size
    ry = slice(int(round(patch_margin * h)), int(round((1 - patch_margin) * h)))
    rx = slice(int(round(patch_margin * w)), int(round((1 - patch_margin) * w)))
    region = Box.from_corners(patch_margin * w, patch_margin * h, (1 - patch_margin) * w, (1 - patch_margin) * h)

    for s in range(n_sequences):
        seq_dir = seq_root / f"seq_{s:03d}"
        (seq_dir / "img").mkdir(parents=True, exist_ok=True)
        background = _textured_background(rng, h, w)
        color = rng.uniform(0.0, 1.0, size=3)
        color = color / max(color.max(), 1e-6)  # bright, distinct sprite color
        u = rng.uniform(0.09, 0.12) * frame_size
        cx = rng.uniform(0.3 * w, 0.7 * w)
        cy = rng.uniform(0.35 * h, 0.65 * h)
        vx, vy = rng.uniform(-1.5, 1.5, size=2)
        phase = rng.uniform(0, 2 * math.pi)

        gt_lines = []
        masks = np.zeros((frames_per_seq, h, w), dtype=bool)
        for t in range(frames_per_seq):
            kps = _sprite_keypoints(cx, cy, u, phase)
            sprite = _render_sprite((h, w), kps, u)
            frame = background.copy()
            frame[sprite] = color
            box = _sprite_mask_bbox(sprite)
            x1, y1, x2, y2 = box.to_corners()
            gt_lines.append(f"{x1:.2f},{y1:.2f},{x2:.2f},{y2:.2f}")
            save_frame(seq_dir / "img" / f"{t + 1:06d}.png", frame)
            if t > 0:
                masks[t, ry, rx] = True
                masks[t][sprite] = False

            # smooth random walk, reflected at a frame-border margin
            vx += rng.uniform(-0.4, 0.4)
            vy += rng.uniform(-0.4, 0.4)
            vx = float(np.clip(vx, -2.5, 2.5))
            vy = float(np.clip(vy, -2.5, 2.5))
            cx += vx
            cy += vy
            margin = 3.0 * u
            if cx < margin or cx > w - margin:
                vx = -vx
                cx = float(np.clip(cx, margin, w - margin))
            if cy < margin or cy > h - margin:
                vy = -vy
                cy = float(np.clip(cy, margin, h - margin))
            phase += 0.45

        (seq_dir / "groundtruth.txt").write_text("\n".join(gt_lines) + "\n")
        np.savez_compressed(seq_dir / "patch_masks.npz", masks=masks)
        (seq_dir / "patch.json").write_text(
            json.dumps(
                {
                    "region": list(region.to_array()),
                    "first_frame_clean": True,
                    "masks": "patch_masks.npz",
                },
                indent=2,
            )
        )
        summary.sequence_dirs.append(seq_dir)

    # keypoint-annotated stills
    stills_dir = root / "stills"
    (stills_dir / "images").mkdir(parents=True, exist_ok=True)
    images_json = []
    annotations_json = []
    for i in range(n_stills):
        background = _textured_background(rng, h, w)
        color = rng.uniform(0.0, 1.0, size=3)
        color = color / max(color.max(), 1e-6)
        u = rng.uniform(0.09, 0.13) * frame_size
        cx = rng.uniform(0.3 * w, 0.7 * w)
        cy = rng.uniform(0.35 * h, 0.65 * h)
        kps = _sprite_keypoints(cx, cy, u, rng.uniform(0, 2 * math.pi))
        sprite = _render_sprite((h, w), kps, u)
        frame = background.copy()
        frame[sprite] = color
        box = _sprite_mask_bbox(sprite)
        name = f"still_{i:04d}.png"
        save_frame(stills_dir / "images" / name, frame)
        x1, y1, x2, y2 = box.to_corners()
        images_json.append({"id": i, "file_name": name, "width": w, "height": h})
        annotations_json.append(
            {
                "id": i,
                "image_id": i,
                "category_id": 1,
                "iscrowd": 0,
                "bbox": [x1, y1, x2 - x1, y2 - y1],
                "keypoints": [round(float(v), 2) for row in kps for v in row],
                "num_keypoints": int((kps[:, 2] > 0).sum()),
            }
        )
    (stills_dir / "annotations.json").write_text(
        json.dumps({"images": images_json, "annotations": annotations_json})
    )
    summary.n_stills = n_stills

    (root / "meta.json").write_text(
        json.dumps(
            {
                "seed": seed,
                "n_sequences": n_sequences,
                "frames_per_seq": frames_per_seq,
                "frame_size": frame_size,
                "n_stills": n_stills,
                "patch_margin": patch_margin,
            },
            indent=2,
        )
    )
    return summary


@dataclass
class LoadedSequence:
    name: str
    frames: np.ndarray  # (T, H, W, 3) float32
    boxes: list[Box]


@dataclass
class LoadedStill:
    image: np.ndarray
    bbox: Box
    keypoints: np.ndarray


@dataclass
class TrainData:
    """In-memory training corpus: sequences plus keypoint-annotated stills."""

    train_seqs: list[LoadedSequence] = field(default_factory=list)
    val_seqs: list[LoadedSequence] = field(default_factory=list)
    stills: list[LoadedStill] = field(default_factory=list)
    val_stills: list[LoadedStill] = field(default_factory=list)

    def val_view(self) -> "TrainData":
        """View whose sampling pool is the validation material."""
        return TrainData(
            train_seqs=self.val_seqs or self.train_seqs,
            stills=self.val_stills or self.stills,
        )


def load_training_data(root: str | Path, still_val_fraction: float = 0.2) -> TrainData:
    """Load a persisted dataset (synthetic or otherwise) fully into memory."""
    root = Path(root)
    data = TrainData()
    for rec in ingest_sequences(root):
        frames = np.stack([load_frame(p) for p in rec.frame_paths])
        loaded = LoadedSequence(rec.name, frames, rec.gt_boxes)
        (data.train_seqs if rec.split == "train" else data.val_seqs).append(loaded)
    ann = root / "stills" / "annotations.json"
    if ann.exists():
        stills = [
            LoadedStill(load_frame(r.image_path), r.bbox, r.keypoints)
            for r in parse_keypoint_annotations(ann, root / "stills" / "images")
        ]
        n_val = int(round(len(stills) * still_val_fraction))
        data.stills = stills[: len(stills) - n_val]
        data.val_stills = stills[len(stills) - n_val :]
    return data


def load_sequence(seq_dir: str | Path):
    """Load a persisted sequence: frames array, gt boxes, and the patch spec
    ingredients (region box, masks) when present."""
    from .attack import PatchSpec  # local import to avoid a cycle

    seq_dir = Path(seq_dir)
    frame_paths = sorted((seq_dir / "img").glob("*.png"))
    if not frame_paths:
        raise DataError(f"{seq_dir}: no frames found")
    frames = np.stack([load_frame(p) for p in frame_paths])
    boxes = read_groundtruth(seq_dir / "groundtruth.txt")
    if len(boxes) != len(frame_paths):
        raise DataError(f"{seq_dir}: frame/gt count mismatch")
    spec = None
    patch_json = seq_dir / "patch.json"
    if patch_json.exists():
        meta = json.loads(patch_json.read_text())
        masks = np.load(seq_dir / meta["masks"])["masks"]
        cx, cy, bw, bh = meta["region"]
        region = Box(cx, cy, bw, bh)
        ry_, rx_ = (
            slice(int(round(cy - bh / 2)), int(round(cy + bh / 2))),
            slice(int(round(cx - bw / 2)), int(round(cx + bw / 2))),
        )
        texture = frames[0, ry_, rx_].astype(np.float64).copy()
        spec = PatchSpec(
            region=region,
            masks=masks,
            texture=texture,
            first_frame_clean=bool(meta.get("first_frame_clean", True)),
        )
    return frames, boxes, spec
