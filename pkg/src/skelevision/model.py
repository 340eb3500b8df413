"""Siamese backbone, cross-correlation RPN head and template-branch keypoint head.

All forward passes are differentiable end to end w.r.t. input pixels.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

TEMPLATE_SIZE = 127
SEARCH_SIZE = 255
TEMPLATE_FEAT = 6
SEARCH_FEAT = 22
RESPONSE_SIZE = 17
TOTAL_STRIDE = 8

SHALLOW_CHANNELS = (128, 64)
DEEP_CHANNELS = (128, 128, 64, 64)


@dataclass(frozen=True)
class BackboneConfig:
    variant: str = "tiny"  # "alexnet" | "tiny"
    out_channels: int = 32
    total_stride: int = TOTAL_STRIDE

    def __post_init__(self):
        if self.variant not in ("alexnet", "tiny"):
            raise ConfigError(f"unknown backbone variant {self.variant!r}")
        if self.variant == "alexnet" and self.out_channels != 256:
            raise ConfigError("alexnet backbone has 256 output channels")
        if self.out_channels <= 0:
            raise ConfigError("out_channels must be positive")


@dataclass(frozen=True)
class KeypointHeadConfig:
    depth: str = "shallow"  # "shallow" | "deep"
    num_keypoints: int = 17

    def __post_init__(self):
        if self.depth not in ("shallow", "deep"):
            raise ConfigError(f"unknown keypoint head depth {self.depth!r}")
        if self.num_keypoints <= 0:
            raise ConfigError("num_keypoints must be positive")

    @property
    def channels(self) -> tuple[int, ...]:
        return SHALLOW_CHANNELS if self.depth == "shallow" else DEEP_CHANNELS


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    keypoint: KeypointHeadConfig = field(default_factory=KeypointHeadConfig)
    num_anchors: int = 5

    def to_dict(self) -> dict:
        return {
            "backbone": {
                "variant": self.backbone.variant,
                "out_channels": self.backbone.out_channels,
                "total_stride": self.backbone.total_stride,
            },
            "keypoint": {
                "depth": self.keypoint.depth,
                "num_keypoints": self.keypoint.num_keypoints,
            },
            "num_anchors": self.num_anchors,
        }

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            backbone=BackboneConfig(**d["backbone"]),
            keypoint=KeypointHeadConfig(**d["keypoint"]),
            num_anchors=int(d["num_anchors"]),
        )


def _backbone_layers(cfg: BackboneConfig) -> nn.Sequential:
    if cfg.variant == "alexnet":
        c = cfg.out_channels
        return nn.Sequential(
            nn.Conv2d(3, 96, kernel_size=11, stride=2),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(kernel_size=3, stride=2),
            nn.Conv2d(96, 256, kernel_size=5),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(kernel_size=3, stride=2),
            nn.Conv2d(256, 384, kernel_size=3),
            nn.ReLU(inplace=True),
            nn.Conv2d(384, 384, kernel_size=3),
            nn.ReLU(inplace=True),
            nn.Conv2d(384, c, kernel_size=3),
        )
    # tiny: 3 valid convs, stride 2 each; same 127->6 / 255->22 spatial contract
    c = cfg.out_channels
    return nn.Sequential(
        nn.Conv2d(3, 16, kernel_size=11, stride=2),
        nn.ReLU(inplace=True),
        nn.Conv2d(16, 32, kernel_size=11, stride=2),
        nn.ReLU(inplace=True),
        nn.Conv2d(32, c, kernel_size=15, stride=2),
    )


class Backbone(nn.Module):
    """Shared feature extractor applied identically to both branches."""

    _SPATIAL = {TEMPLATE_SIZE: TEMPLATE_FEAT, SEARCH_SIZE: SEARCH_FEAT}

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.layers = _backbone_layers(cfg)

    def forward(self, patch: torch.Tensor) -> torch.Tensor:
        if patch.dim() == 3:
            patch = patch.unsqueeze(0)
        if patch.dim() != 4 or patch.shape[1] != 3:
            raise ShapeError(f"expected (B, 3, s, s) input, got {tuple(patch.shape)}")
        s = patch.shape[-1]
        if patch.shape[-2] != s or s not in self._SPATIAL:
            raise ShapeError(f"unsupported spatial size {tuple(patch.shape[-2:])}")
        out = self.layers(patch)
        expect = self._SPATIAL[s]
        if out.shape[-1] != expect or out.shape[-2] != expect:
            raise ShapeError(f"backbone produced {tuple(out.shape)}, expected {expect}x{expect}")
        return out


def _xcorr(search: torch.Tensor, kernels: torch.Tensor, out_channels: int) -> torch.Tensor:
    """Per-sample cross correlation of (B, C, Hs, Ws) search features against
    (B, out_channels*C, hk, wk) projected template kernels."""
    b, c = search.shape[0], search.shape[1]
    k = kernels.reshape(b * out_channels, c, kernels.shape[-2], kernels.shape[-1])
    s = search.reshape(1, b * c, search.shape[-2], search.shape[-1])
    out = F.conv2d(s, k, groups=b)
    return out.reshape(b, out_channels, out.shape[-2], out.shape[-1])


class RPNHead(nn.Module):
    """Projects template features into correlation kernels and correlates them
    against detection features, yielding 2m classification and 4m regression
    channels on the response grid."""

    def __init__(self, in_channels: int, num_anchors: int):
        super().__init__()
        if num_anchors <= 0:
            raise ConfigError("num_anchors must be positive")
        self.num_anchors = num_anchors
        m, c = num_anchors, in_channels
        self.cls_kernel = nn.Conv2d(c, 2 * m * c, kernel_size=3)
        self.cls_search = nn.Conv2d(c, c, kernel_size=3)
        self.reg_kernel = nn.Conv2d(c, 4 * m * c, kernel_size=3)
        self.reg_search = nn.Conv2d(c, c, kernel_size=3)
        self.reg_adjust = nn.Conv2d(4 * m, 4 * m, kernel_size=1)

    def forward(self, feat_z: torch.Tensor, feat_x: torch.Tensor):
        if feat_z.dim() == 3:
            feat_z = feat_z.unsqueeze(0)
        if feat_x.dim() == 3:
            feat_x = feat_x.unsqueeze(0)
        if feat_z.shape[1] != feat_x.shape[1]:
            raise ShapeError(
                f"template/detection channel mismatch: {feat_z.shape[1]} vs {feat_x.shape[1]}"
            )
        m = self.num_anchors
        cls = _xcorr(self.cls_search(feat_x), self.cls_kernel(feat_z), 2 * m)
        reg = _xcorr(self.reg_search(feat_x), self.reg_kernel(feat_z), 4 * m)
        reg = self.reg_adjust(reg)
        return cls, reg


class KeypointHead(nn.Module):
    """Template-branch head emitting per-pixel keypoint logits at template size."""

    def __init__(self, in_channels: int, cfg: KeypointHeadConfig, out_size: int = TEMPLATE_SIZE):
        super().__init__()
        self.cfg = cfg
        self.out_size = out_size
        blocks: list[nn.Module] = []
        prev = in_channels
        for ch in cfg.channels:
            blocks.append(nn.Conv2d(prev, ch, kernel_size=3, padding=1))
            blocks.append(nn.ReLU(inplace=True))
            prev = ch
        self.blocks = nn.Sequential(*blocks)
        # 6x6 -> 14x14, then bilinear to the template size
        self.upsample = nn.ConvTranspose2d(prev, cfg.num_keypoints, kernel_size=4, stride=2)

    def forward(self, feat_z: torch.Tensor) -> torch.Tensor:
        if feat_z.dim() == 3:
            feat_z = feat_z.unsqueeze(0)
        out = self.upsample(self.blocks(feat_z))
        return F.interpolate(
            out, size=(self.out_size, self.out_size), mode="bilinear", align_corners=False
        )

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


class SiamMTL(nn.Module):
    """Full model: shared backbone + RPN head + keypoint head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg.backbone)
        self.rpn = RPNHead(cfg.backbone.out_channels, cfg.num_anchors)
        self.keypoint_head = KeypointHead(cfg.backbone.out_channels, cfg.keypoint)

    def features(self, patch: torch.Tensor) -> torch.Tensor:
        return self.backbone(patch)

    def rpn_forward(self, feat_z: torch.Tensor, feat_x: torch.Tensor):
        return self.rpn(feat_z, feat_x)

    def keypoint_forward(self, feat_z: torch.Tensor) -> torch.Tensor:
        return self.keypoint_head(feat_z)


def build_model(cfg: ModelConfig, seed: int | None = None) -> SiamMTL:
    """Construct a model; with a seed, initialization is reproducible."""
    if seed is not None:
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        try:
            return SiamMTL(cfg)
        finally:
            torch.random.set_rng_state(gen_state)
    return SiamMTL(cfg)
