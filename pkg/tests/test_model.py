import numpy as np
import pytest
import torch

from conftest import check_grad_against_fd
from skelevision.errors import ConfigError, ShapeError
from skelevision.model import (
    BackboneConfig,
    KeypointHead,
    KeypointHeadConfig,
    ModelConfig,
    SiamMTL,
    build_model,
)

TINY = ModelConfig()
ALEX = ModelConfig(backbone=BackboneConfig(variant="alexnet", out_channels=256))


@pytest.fixture(scope="module")
def tiny_model():
    return build_model(TINY, seed=0)


@pytest.fixture(scope="module")
def tiny_model64():
    return build_model(TINY, seed=0).double()


class TestBackboneShapes:
    @pytest.mark.parametrize("cfg,channels", [(TINY, 32), (ALEX, 256)])
    def test_template_and_search(self, cfg, channels):
        model = build_model(cfg, seed=0)
        z = torch.rand(1, 3, 127, 127)
        x = torch.rand(1, 3, 255, 255)
        assert tuple(model.features(z).shape) == (1, channels, 6, 6)
        assert tuple(model.features(x).shape) == (1, channels, 22, 22)

    def test_rejects_other_sizes(self, tiny_model):
        with pytest.raises(ShapeError):
            tiny_model.features(torch.rand(1, 3, 100, 100))
        with pytest.raises(ShapeError):
            tiny_model.features(torch.rand(1, 1, 127, 127))

    def test_zero_image_finite(self, tiny_model):
        out = tiny_model.features(torch.zeros(1, 3, 127, 127))
        assert torch.isfinite(out).all()

    def test_branch_sharing_bit_identical(self, tiny_model):
        patch = torch.rand(1, 3, 127, 127)
        as_template = tiny_model.features(patch)
        as_detection = tiny_model.backbone(patch)
        assert torch.equal(as_template, as_detection)


class TestRPNHead:
    def test_output_channels(self, tiny_model):
        z = tiny_model.features(torch.rand(1, 3, 127, 127))
        x = tiny_model.features(torch.rand(1, 3, 255, 255))
        cls, reg = tiny_model.rpn_forward(z, x)
        assert tuple(cls.shape) == (1, 10, 17, 17)
        assert tuple(reg.shape) == (1, 20, 17, 17)

    def test_channel_mismatch(self, tiny_model):
        with pytest.raises(ShapeError):
            tiny_model.rpn_forward(torch.rand(1, 8, 6, 6), torch.rand(1, 32, 22, 22))

    def test_constant_kernel_peaks_at_center(self):
        """With constant correlation kernels and a centered bump in the search
        features, the response is maximal at the center cell."""
        model = build_model(TINY, seed=1)
        with torch.no_grad():
            for conv in (model.rpn.cls_kernel, model.rpn.cls_search):
                conv.weight.fill_(0.01)
                conv.bias.fill_(0.0)
        z = torch.ones(1, 32, 6, 6)
        x = torch.zeros(1, 32, 22, 22)
        x[:, :, 9:13, 9:13] = 1.0  # bump centered in the 22x22 map
        cls, _ = model.rpn_forward(z, x)
        resp = cls[0, 0]
        idx = torch.argmax(resp)
        assert (idx // 17, idx % 17) == (8, 8)

    def test_anchor_block_permutation(self):
        """Permuting per-anchor kernel blocks permutes output channel blocks."""
        model = build_model(TINY, seed=2)
        z = model.features(torch.rand(1, 3, 127, 127))
        x = model.features(torch.rand(1, 3, 255, 255))
        cls, _ = model.rpn_forward(z, x)
        m, c = 5, 32
        perm = torch.tensor([3, 1, 4, 0, 2])
        with torch.no_grad():
            w = model.rpn.cls_kernel.weight.reshape(m, 2 * c, c, 3, 3)[perm].reshape(-1, c, 3, 3)
            b = model.rpn.cls_kernel.bias.reshape(m, 2 * c)[perm].reshape(-1)
            model.rpn.cls_kernel.weight.copy_(w)
            model.rpn.cls_kernel.bias.copy_(b)
        cls_perm, _ = model.rpn_forward(z, x)
        want = cls.reshape(1, m, 2, 17, 17)[:, perm].reshape(1, 2 * m, 17, 17)
        assert torch.allclose(cls_perm, want, atol=1e-6)


class TestKeypointHead:
    @pytest.mark.parametrize("depth", ["shallow", "deep"])
    def test_output_shape(self, depth):
        cfg = ModelConfig(keypoint=KeypointHeadConfig(depth=depth))
        model = build_model(cfg, seed=0)
        z = model.features(torch.rand(1, 3, 127, 127))
        out = model.keypoint_forward(z)
        assert tuple(out.shape) == (1, 17, 127, 127)

    def test_deep_shallow_parameter_ratio(self):
        shallow = KeypointHead(32, KeypointHeadConfig(depth="shallow")).parameter_count()
        deep = KeypointHead(32, KeypointHeadConfig(depth="deep")).parameter_count()
        assert 1.5 <= deep / shallow <= 2.5

    def test_zero_input_zero_biases_gives_zero(self):
        # with every bias removed the head is a cascade of linear maps and
        # ReLUs, so a zero feature map must come out exactly zero
        head = KeypointHead(32, KeypointHeadConfig())
        with torch.no_grad():
            for p in head.named_parameters():
                if "bias" in p[0]:
                    p[1].zero_()
        out = head(torch.zeros(1, 32, 6, 6))
        assert torch.equal(out, torch.zeros_like(out))

    def test_rejects_bad_k(self):
        with pytest.raises(ConfigError):
            KeypointHeadConfig(num_keypoints=0)


class TestGradients:
    def test_rpn_scalar_grad_matches_fd(self, tiny_model64):
        model = tiny_model64
        torch.manual_seed(0)
        z = torch.rand(1, 3, 127, 127, dtype=torch.float64)
        x = torch.rand(1, 3, 255, 255, dtype=torch.float64)

        def fn(inp):
            cls, reg = model.rpn_forward(model.features(z), model.features(inp))
            return (cls * cls).mean() + reg.abs().mean()

        check_grad_against_fd(fn, x, n_coords=4, seed=1)

    def test_keypoint_scalar_grad_matches_fd(self, tiny_model64):
        model = tiny_model64
        torch.manual_seed(1)
        z = torch.rand(1, 3, 127, 127, dtype=torch.float64)

        def fn(inp):
            return torch.sigmoid(model.keypoint_forward(model.features(inp))).mean()

        check_grad_against_fd(fn, z, n_coords=4, seed=2)


class TestModelConfig:
    def test_digest_stable_and_distinct(self):
        assert TINY.digest() == ModelConfig().digest()
        assert TINY.digest() != ALEX.digest()
        deep = ModelConfig(keypoint=KeypointHeadConfig(depth="deep"))
        assert deep.digest() != TINY.digest()

    def test_round_trip(self):
        assert ModelConfig.from_dict(ALEX.to_dict()) == ALEX

    def test_seeded_build_reproducible(self):
        m1 = build_model(TINY, seed=42)
        m2 = build_model(TINY, seed=42)
        for p1, p2 in zip(m1.parameters(), m2.parameters()):
            assert torch.equal(p1, p2)
