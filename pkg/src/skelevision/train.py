"""STL/MTL fine-tuning, keypoint-head pretraining, validation-based model
selection and sweeps over the keypoint loss weight."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    AugmentConfig,
    LoadedStill,
    TrainData,
    TrainSample,
    make_still_pair,
    make_video_pair,
)
from .errors import ConfigError, NumericsError
from .losses import (
    LossWeights,
    assign_anchor_targets,
    kpt_loss,
    make_keypoint_target,
    reg_loss,
    cls_loss,
)
from .model import ModelConfig, BackboneConfig, KeypointHeadConfig, SiamMTL, build_model
from .tracking import TrackerConfig, track_sequence

log = logging.getLogger(__name__)

MODES = ("stl", "mtl", "kpt-pretrain")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "mtl"
    lambda_k: float = 1.0
    lambda_c: float = 1.0
    lambda_r: float = 1.2
    lr: float = 8e-4
    epochs: int = 50
    seed: int = 0
    head_depth: str = "shallow"
    backbone_variant: str = "tiny"
    backbone_channels: int = 32
    batch_size: int = 8
    steps_per_epoch: int = 20
    momentum: float = 0.9
    max_pair_gap: int = 30
    still_fraction: float = 0.5
    keypoint_radius: int = 2
    init_checkpoint: str | None = None
    pretrained_head: str | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown train mode {self.mode!r}")
        if self.mode == "stl" and self.lambda_k != 0:
            raise ConfigError("stl mode requires lambda_k = 0")
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("lr, epochs and batch_size must be positive")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            backbone=BackboneConfig(
                variant=self.backbone_variant,
                out_channels=256 if self.backbone_variant == "alexnet" else self.backbone_channels,
            ),
            keypoint=KeypointHeadConfig(depth=self.head_depth),
        )

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_c, self.lambda_r, self.lambda_k)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class RunRecord:
    config: dict
    digest: str
    epochs: list[dict] = field(default_factory=list)
    selected_epoch: int = -1
    checkpoint_path: str = ""
    wall_clock: float = 0.0
    aborted: bool = False

    def write(self, out_dir: Path) -> None:
        lines = [json.dumps({"type": "config", "digest": self.digest, "config": self.config})]
        for i, ep in enumerate(self.epochs):
            lines.append(json.dumps({"type": "epoch", "index": i, **ep}))
        lines.append(
            json.dumps(
                {
                    "type": "summary",
                    "selected_epoch": self.selected_epoch,
                    "checkpoint_path": self.checkpoint_path,
                    "wall_clock": self.wall_clock,
                    "aborted": self.aborted,
                }
            )
        )
        (out_dir / "run.jsonl").write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, out_dir: Path) -> "RunRecord":
        rec = None
        for line in (out_dir / "run.jsonl").read_text().splitlines():
            d = json.loads(line)
            if d["type"] == "config":
                rec = cls(config=d["config"], digest=d["digest"])
            elif d["type"] == "epoch":
                rec.epochs.append({k: v for k, v in d.items() if k not in ("type", "index")})
            elif d["type"] == "summary":
                rec.selected_epoch = d["selected_epoch"]
                rec.checkpoint_path = d["checkpoint_path"]
                rec.wall_clock = d["wall_clock"]
                rec.aborted = d.get("aborted", False)
        if rec is None:
            raise ConfigError(f"no run record in {out_dir}")
        return rec


def _sample_batch(cfg: TrainConfig, data: TrainData, rng: np.random.Generator) -> list[TrainSample]:
    aug = AugmentConfig()
    batch = []
    for _ in range(cfg.batch_size):
        use_still = (
            data.stills
            and (
                cfg.mode == "kpt-pretrain"  # only stills carry keypoints
                or not data.train_seqs
                or rng.random() < cfg.still_fraction
            )
        )
        if use_still:
            rec = data.stills[rng.integers(len(data.stills))]
            batch.append(make_still_pair(rec.image, rec.bbox, rec.keypoints, aug, rng))
        else:
            seq = data.train_seqs[rng.integers(len(data.train_seqs))]
            n = len(seq.boxes)
            i = int(rng.integers(n))
            lo, hi = max(0, i - cfg.max_pair_gap), min(n - 1, i + cfg.max_pair_gap)
            j = int(rng.integers(lo, hi + 1))
            batch.append(
                make_video_pair(
                    seq.frames[i], seq.boxes[i], seq.frames[j], seq.boxes[j], aug, rng
                )
            )
    return batch


def _to_batch_tensor(patches: list[np.ndarray], dtype) -> torch.Tensor:
    arr = np.stack([p.transpose(2, 0, 1) for p in patches])
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)


def _batch_loss(
    model: SiamMTL,
    batch: list[TrainSample],
    cfg: TrainConfig,
    tracker_cfg: TrackerConfig,
    rng: np.random.Generator,
) -> torch.Tensor:
    """Mean per-sample loss over a batch; forward passes are batched."""
    dtype = next(model.parameters()).dtype
    weights = cfg.weights()
    templates = _to_batch_tensor([s.template for s in batch], dtype)
    detections = _to_batch_tensor([s.detection for s in batch], dtype)
    feat_z = model.features(templates)
    feat_x = model.features(detections)
    cls, reg = model.rpn_forward(feat_z, feat_x)

    total = torch.zeros((), dtype=dtype)
    for b, sample in enumerate(batch):
        targets = assign_anchor_targets(tracker_cfg.anchors, sample.detection_box, rng=rng)
        total = total + weights.lambda_c * cls_loss(cls[b], targets)
        total = total + weights.lambda_r * reg_loss(reg[b], targets)
    total = total / len(batch)

    if weights.lambda_k > 0:
        kp_idx = [b for b, s in enumerate(batch) if s.keypoints is not None]
        if kp_idx:
            logits = model.keypoint_forward(feat_z[kp_idx])
            kloss = torch.zeros((), dtype=dtype)
            for row, b in enumerate(kp_idx):
                target = make_keypoint_target(batch[b].keypoints, radius=cfg.keypoint_radius)
                kloss = kloss + kpt_loss(logits[row], target)
            total = total + weights.lambda_k * kloss / len(batch)
    return total


def _pretrain_loss(model: SiamMTL, batch: list[TrainSample], cfg: TrainConfig) -> torch.Tensor:
    dtype = next(model.parameters()).dtype
    kp = [s for s in batch if s.keypoints is not None]
    if not kp:
        raise ConfigError("kpt-pretrain needs keypoint-annotated samples")
    templates = _to_batch_tensor([s.template for s in kp], dtype)
    with torch.no_grad():
        feat_z = model.features(templates)
    logits = model.keypoint_forward(feat_z)
    total = torch.zeros((), dtype=dtype)
    for row, sample in enumerate(kp):
        target = make_keypoint_target(sample.keypoints, radius=cfg.keypoint_radius)
        total = total + kpt_loss(logits[row], target)
    return total / len(kp)


def _validate(model: SiamMTL, data: TrainData, cfg: TrainConfig, tracker_cfg: TrackerConfig):
    """Validation loss (deterministic batch) and tracking mIoU on val sequences."""
    rng = np.random.default_rng(cfg.seed + 10_000)
    batch = _sample_batch(cfg, data.val_view(), rng)
    with torch.no_grad():
        if cfg.mode == "kpt-pretrain":
            val_loss = float(_pretrain_loss(model, batch, cfg))
        else:
            val_loss = float(_batch_loss(model, batch, cfg, tracker_cfg, rng))
    val_miou = float("nan")
    if cfg.mode != "kpt-pretrain" and data.val_seqs:
        results = [
            track_sequence(model, list(seq.frames), seq.boxes, tracker_cfg)
            for seq in data.val_seqs
        ]
        val_miou = float(np.mean([r.miou for r in results]))
    return val_loss, val_miou


def train(cfg: TrainConfig, data: TrainData, out_dir: str | Path) -> RunRecord:
    """Minibatch SGD training with per-epoch validation and best-checkpoint
    persistence; deterministic given the config seed."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    tracker_cfg = TrackerConfig()

    model = build_model(cfg.model_config(), seed=cfg.seed)
    if cfg.init_checkpoint:
        load_checkpoint(cfg.init_checkpoint, model)
    if cfg.pretrained_head:
        load_checkpoint(cfg.pretrained_head, model, submodule="keypoint_head")

    if cfg.mode == "kpt-pretrain":
        for p in model.backbone.parameters():
            p.requires_grad_(False)
        trainable = list(model.keypoint_head.parameters())
    else:
        trainable = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.SGD(trainable, lr=cfg.lr, momentum=cfg.momentum)

    record = RunRecord(config=cfg.to_dict(), digest=cfg.digest())
    best_path = out_dir / "best.ckpt"
    last_path = out_dir / "last.ckpt"
    best_metric = -float("inf")
    try:
        for epoch in range(cfg.epochs):
            model.train()
            losses = []
            for _ in range(cfg.steps_per_epoch):
                batch = _sample_batch(cfg, data, rng)
                if cfg.mode == "kpt-pretrain":
                    loss = _pretrain_loss(model, batch, cfg)
                else:
                    loss = _batch_loss(model, batch, cfg, tracker_cfg, rng)
                if not torch.isfinite(loss):
                    raise NumericsError(f"non-finite training loss at epoch {epoch}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                losses.append(float(loss.detach()))
            model.eval()
            val_loss, val_miou = _validate(model, data, cfg, tracker_cfg)
            record.epochs.append(
                {
                    "train_loss": float(np.mean(losses)),
                    "val_loss": val_loss,
                    "val_miou": val_miou,
                }
            )
            # selection: max val mIoU for tracking modes, min val loss for pretrain
            metric = -val_loss if cfg.mode == "kpt-pretrain" else val_miou
            if metric > best_metric:
                best_metric = metric
                record.selected_epoch = epoch
                save_checkpoint(best_path, model, {"train_digest": record.digest, "epoch": epoch})
            save_checkpoint(last_path, model, {"train_digest": record.digest, "epoch": epoch})
            log.info(
                "epoch %d: train %.4f val %.4f miou %.3f",
                epoch, record.epochs[-1]["train_loss"], val_loss, val_miou,
            )
    except NumericsError:
        record.aborted = True
        record.checkpoint_path = str(best_path if best_path.exists() else last_path)
        record.wall_clock = time.time() - t0
        record.write(out_dir)
        raise
    record.checkpoint_path = str(best_path)
    record.wall_clock = time.time() - t0
    record.write(out_dir)
    return record


def run_is_complete(out_dir: Path) -> bool:
    try:
        rec = RunRecord.read(out_dir)
    except (ConfigError, FileNotFoundError, json.JSONDecodeError):
        return False
    return rec.selected_epoch >= 0 and not rec.aborted and Path(rec.checkpoint_path).exists()


def sweep(
    base_cfg: TrainConfig,
    lambda_values: list[float],
    data: TrainData,
    out_root: str | Path,
    warmup_epochs: int = 0,
) -> list[RunRecord]:
    """One train run per lambda_k value, digest-keyed and resumable.

    With ``warmup_epochs`` a shared tracking-only warmup run provides one
    common initialization for every arm."""
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)

    init_ckpt = base_cfg.init_checkpoint
    if warmup_epochs > 0:
        warm_cfg = dataclasses.replace(
            base_cfg, mode="stl", lambda_k=0.0, epochs=warmup_epochs, init_checkpoint=None
        )
        warm_dir = out_root / f"warmup-{warm_cfg.digest()}"
        if run_is_complete(warm_dir):
            warm_rec = RunRecord.read(warm_dir)
        else:
            warm_rec = train(warm_cfg, data, warm_dir)
        init_ckpt = warm_rec.checkpoint_path

    records = []
    for lam in lambda_values:
        cfg = dataclasses.replace(
            base_cfg,
            mode="stl" if lam == 0 else "mtl",
            lambda_k=float(lam),
            init_checkpoint=init_ckpt,
        )
        run_dir = out_root / cfg.digest()
        if run_is_complete(run_dir):
            log.info("skipping completed run %s", cfg.digest())
            records.append(RunRecord.read(run_dir))
            continue
        run_dir.mkdir(parents=True, exist_ok=True)
        records.append(train(cfg, data, run_dir))
    (out_root / "sweep.json").write_text(
        json.dumps({"lambda_values": lambda_values, "digests": [r.digest for r in records]}, indent=2)
    )
    return records
