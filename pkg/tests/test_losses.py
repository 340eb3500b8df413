import math

import numpy as np
import pytest
import torch

from conftest import check_grad_against_fd
from skelevision.errors import ConfigError, ShapeError
from skelevision.geometry import Box, decode_deltas, Deltas, generate_anchors, iou
from skelevision.losses import (
    IGNORE_LABEL,
    NEG_LABEL,
    POS_LABEL,
    AnchorTargets,
    KeypointTarget,
    LossWeights,
    assign_anchor_targets,
    cls_loss,
    kpt_loss,
    make_keypoint_target,
    mtl_loss,
    reg_loss,
    smooth_l1,
    trk_loss,
)

ANCHORS = generate_anchors(17, 17, 8, [0.33, 0.5, 1.0, 2.0, 3.0], 64)


def random_targets(seed: int) -> AnchorTargets:
    rng = np.random.default_rng(seed)
    gt = Box(float(rng.uniform(80, 175)), float(rng.uniform(80, 175)),
             float(rng.uniform(30, 90)), float(rng.uniform(30, 90)))
    return assign_anchor_targets(ANCHORS, gt, rng=np.random.default_rng(seed + 1))


class TestAssignTargets:
    def test_anchor_equal_to_gt(self):
        gt = ANCHORS.box_at(8, 8, 2)
        t = assign_anchor_targets(ANCHORS, gt)
        assert t.label[8, 8, 2] == POS_LABEL
        np.testing.assert_allclose(t.reg_target[8, 8, 2], 0.0, atol=1e-12)

    def test_disjoint_gt_forces_single_positive(self):
        # gt barely inside the patch corner, overlapping no anchor above 0.6
        t = assign_anchor_targets(ANCHORS, Box(2, 2, 3, 3))
        assert t.pos_count == 1
        assert (t.label == POS_LABEL).sum() == 1

    def test_matches_threshold_scan(self):
        for seed in range(20):
            t = random_targets(seed)
            rng = np.random.default_rng(seed)
            gt = Box(float(rng.uniform(80, 175)), float(rng.uniform(80, 175)),
                     float(rng.uniform(30, 90)), float(rng.uniform(30, 90)))
            for (i, j, k) in zip(*np.nonzero(t.label == POS_LABEL)):
                assert iou(ANCHORS.box_at(i, j, k), gt) >= 0.6 or t.pos_count == 1
            for (i, j, k) in zip(*np.nonzero(t.label == NEG_LABEL)):
                assert iou(ANCHORS.box_at(i, j, k), gt) <= 0.3

    def test_caps(self):
        # a gt the size of the base anchor overlaps many anchors strongly
        t = assign_anchor_targets(ANCHORS, Box(127, 127, 64, 64))
        assert t.pos_count <= 16
        assert t.neg_count <= 48
        assert (t.label == POS_LABEL).sum() == t.pos_count
        assert (t.label == NEG_LABEL).sum() == t.neg_count

    def test_negative_subsample_seeded(self):
        gt = Box(127, 127, 64, 64)
        a = assign_anchor_targets(ANCHORS, gt, rng=np.random.default_rng(7))
        b = assign_anchor_targets(ANCHORS, gt, rng=np.random.default_rng(7))
        c = assign_anchor_targets(ANCHORS, gt, rng=np.random.default_rng(8))
        assert np.array_equal(a.label, b.label)
        assert not np.array_equal(a.label, c.label)

    def test_positive_reg_targets_decode_back(self):
        t = random_targets(3)
        rng = np.random.default_rng(3)
        gt = Box(float(rng.uniform(80, 175)), float(rng.uniform(80, 175)),
                 float(rng.uniform(30, 90)), float(rng.uniform(30, 90)))
        for (i, j, k) in zip(*np.nonzero(t.label == POS_LABEL)):
            back = decode_deltas(ANCHORS.box_at(i, j, k), Deltas(*t.reg_target[i, j, k]))
            assert abs(back.cx - gt.cx) < 1e-6
            assert abs(back.w - gt.w) < 1e-6


class TestClsLoss:
    def test_uniform_logits_give_ln2(self):
        t = random_targets(0)
        logits = torch.zeros(10, 17, 17)
        assert float(cls_loss(logits, t)) == pytest.approx(math.log(2), abs=1e-6)

    def test_confident_correct_goes_to_zero(self):
        t = random_targets(0)
        label = torch.from_numpy(t.label).permute(2, 0, 1)  # (m, 17, 17)
        prev = None
        for margin in (2.0, 6.0, 12.0):
            logits = torch.zeros(5, 2, 17, 17)
            logits[:, 1][label == POS_LABEL] = margin
            logits[:, 0][label == NEG_LABEL] = margin
            val = float(cls_loss(logits.reshape(10, 17, 17), t))
            if prev is not None:
                assert val < prev
            prev = val
        assert prev < 1e-4

    def test_matches_scalar_recomputation(self):
        t = random_targets(5)
        torch.manual_seed(5)
        logits = torch.randn(10, 17, 17, dtype=torch.float64)
        per = logits.reshape(5, 2, 17, 17).numpy()
        total, n = 0.0, 0
        for (i, j, k) in zip(*np.nonzero(t.label != IGNORE_LABEL)):
            bg, fg = per[k, 0, i, j], per[k, 1, i, j]
            z = np.logaddexp(bg, fg)
            total += z - (fg if t.label[i, j, k] == POS_LABEL else bg)
            n += 1
        assert float(cls_loss(logits, t)) == pytest.approx(total / n, abs=1e-6)

    def test_all_ignored_rejected(self):
        t = random_targets(0)
        t.label[:] = IGNORE_LABEL
        with pytest.raises(ShapeError):
            cls_loss(torch.zeros(10, 17, 17), t)


class TestRegLoss:
    def test_exact_prediction_zero(self):
        t = random_targets(1)
        pred = torch.from_numpy(t.reg_target).permute(2, 3, 0, 1).reshape(20, 17, 17)
        assert float(reg_loss(pred, t)) == pytest.approx(0.0, abs=1e-12)

    def test_single_component_error_two_gives_1_5(self):
        # |u| = 2 >= 1, so smooth-L1 = |u| - 0.5 = 1.5
        t = random_targets(1)
        t.label[:] = IGNORE_LABEL
        t.label[8, 8, 0] = POS_LABEL
        pred = torch.from_numpy(t.reg_target).permute(2, 3, 0, 1).reshape(20, 17, 17).clone()
        pred.reshape(5, 4, 17, 17)[0, 2, 8, 8] += 2.0
        assert float(reg_loss(pred, t)) == pytest.approx(1.5, abs=1e-6)

    def test_smooth_l1_piecewise_and_continuity(self):
        u = torch.tensor([-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0])
        want = torch.tensor([1.5, 0.5, 0.125, 0.0, 0.125, 0.5, 1.5])
        assert torch.allclose(smooth_l1(u), want)
        # derivative continuous at |u| = 1 with magnitude 1
        for s in (1.0, -1.0):
            x = torch.tensor(s, requires_grad=True)
            smooth_l1(x).backward()
            assert float(x.grad) == pytest.approx(s)
            x = torch.tensor(s * (1 - 1e-6), requires_grad=True)
            smooth_l1(x).backward()
            assert float(x.grad) == pytest.approx(s, abs=1e-5)

    def test_matches_scalar_recomputation(self):
        t = random_targets(6)
        torch.manual_seed(6)
        pred = torch.randn(20, 17, 17, dtype=torch.float64)
        per = pred.reshape(5, 4, 17, 17).numpy()

        def sl1(u):
            return 0.5 * u * u if abs(u) < 1 else abs(u) - 0.5

        vals = []
        for (i, j, k) in zip(*np.nonzero(t.label == POS_LABEL)):
            vals.append(sum(sl1(per[k, c, i, j] - t.reg_target[i, j, k, c]) for c in range(4)))
        assert float(reg_loss(pred, t)) == pytest.approx(np.mean(vals), abs=1e-6)


class TestTrkLoss:
    def test_weight_isolation(self):
        t = random_targets(2)
        torch.manual_seed(2)
        cls = torch.randn(10, 17, 17)
        reg = torch.randn(20, 17, 17)
        only_c = trk_loss(cls, reg, t, LossWeights(lambda_c=1.0, lambda_r=0.0))
        only_r = trk_loss(cls, reg, t, LossWeights(lambda_c=0.0, lambda_r=1.0))
        assert float(only_c) == pytest.approx(float(cls_loss(cls, t)))
        assert float(only_r) == pytest.approx(float(reg_loss(reg, t)))

    def test_default_weights_arithmetic(self):
        # component losses 0.5 and 0.25 with (1.0, 1.2) -> 0.8
        assert 1.0 * 0.5 + 1.2 * 0.25 == pytest.approx(0.8)
        t = random_targets(2)
        torch.manual_seed(3)
        cls = torch.randn(10, 17, 17)
        reg = torch.randn(20, 17, 17)
        got = trk_loss(cls, reg, t, LossWeights())
        want = 1.0 * float(cls_loss(cls, t)) + 1.2 * float(reg_loss(reg, t))
        assert float(got) == pytest.approx(want, rel=1e-6)

    def test_negative_weights_rejected(self):
        with pytest.raises(ConfigError):
            LossWeights(lambda_c=-1.0)


def disk_pixel_count(x, y, radius, size=127):
    """Rasterization oracle for the keypoint disk stamp."""
    yy, xx = np.mgrid[0:size, 0:size]
    return int(((xx - x) ** 2 + (yy - y) ** 2 <= radius**2).sum())


class TestKeypointTarget:
    def test_all_invisible_all_zero(self):
        kps = np.array([[10.0, 10.0, 0.0], [20.0, 20.0, 0.0]])
        t = make_keypoint_target(kps)
        assert t.target_map.sum() == 0
        assert t.visibility.sum() == 0

    def test_radius_zero_single_pixel(self):
        t = make_keypoint_target(np.array([[63.0, 63.0, 2.0]]), radius=0)
        assert t.target_map.sum() == 1
        assert t.target_map[0, 63, 63] == 1.0

    def test_disk_has_13_pixels(self):
        t = make_keypoint_target(np.array([[3.0, 3.0, 2.0]]), radius=2)
        assert int(t.target_map.sum()) == 13
        assert disk_pixel_count(3.0, 3.0, 2) == 13

    def test_clipped_stamp_matches_raster_oracle(self):
        for x, y in [(0.0, 0.0), (126.0, 1.0), (-1.0, 60.0), (60.5, 125.5)]:
            t = make_keypoint_target(np.array([[x, y, 2.0]]), radius=2)
            assert int(t.target_map.sum()) == disk_pixel_count(x, y, 2)

    def test_fully_outside_forces_invisible(self):
        t = make_keypoint_target(np.array([[-10.0, -10.0, 2.0]]), radius=2)
        assert t.visibility[0] == 0
        assert t.target_map.sum() == 0


class TestKptLoss:
    def test_zero_logits_give_ln2(self):
        t = make_keypoint_target(np.array([[40.0, 50.0, 2.0], [90.0, 30.0, 2.0]]))
        assert float(kpt_loss(torch.zeros(2, 127, 127), t)) == pytest.approx(
            math.log(2), abs=1e-6
        )

    def test_invisible_channels_ignored(self):
        t = make_keypoint_target(
            np.array([[40.0, 50.0, 2.0], [90.0, 30.0, 0.0], [10.0, 110.0, 1.0]])
        )
        torch.manual_seed(0)
        logits = torch.randn(3, 127, 127)
        base = float(kpt_loss(logits, t))
        wild = logits.clone()
        wild[1] = 1e4  # invisible channel: arbitrary values must not matter
        assert float(kpt_loss(wild, t)) == base

    def test_invisible_channel_zero_gradient(self):
        t = make_keypoint_target(np.array([[40.0, 50.0, 2.0], [90.0, 30.0, 0.0]]))
        logits = torch.randn(2, 127, 127, requires_grad=True)
        kpt_loss(logits, t).backward()
        assert torch.equal(logits.grad[1], torch.zeros(127, 127))
        assert logits.grad[0].abs().sum() > 0

    def test_all_invisible_warns_and_zero(self, caplog):
        t = make_keypoint_target(np.array([[40.0, 50.0, 0.0]]))
        logits = torch.randn(1, 127, 127, requires_grad=True)
        with caplog.at_level("WARNING"):
            loss = kpt_loss(logits, t)
        assert float(loss.detach()) == 0.0
        assert any("invisible" in r.message for r in caplog.records)
        loss.backward()
        assert torch.equal(logits.grad, torch.zeros_like(logits))

    def test_matches_scalar_recomputation(self):
        t = make_keypoint_target(
            np.array([[40.0, 50.0, 2.0], [90.0, 30.0, 0.0], [10.0, 110.0, 1.0]])
        )
        torch.manual_seed(4)
        logits = torch.randn(3, 127, 127, dtype=torch.float64)
        x = logits.numpy()
        vis = t.visibility.astype(bool)
        y = t.target_map[vis]
        z = x[vis]
        bce = np.logaddexp(0, z) - y * z  # stable BCE-with-logits per pixel
        assert float(kpt_loss(logits, t)) == pytest.approx(bce.mean(), abs=1e-6)


class TestMtlLoss:
    def _parts(self, seed):
        t = random_targets(seed)
        torch.manual_seed(seed)
        cls = torch.randn(10, 17, 17)
        reg = torch.randn(20, 17, 17)
        kt = make_keypoint_target(np.array([[40.0, 50.0, 2.0]]))
        kl = torch.randn(1, 127, 127)
        return t, cls, reg, kt, kl

    def test_lambda_zero_bitwise_equals_trk(self):
        t, cls, reg, kt, kl = self._parts(9)
        w = LossWeights(lambda_k=0.0)
        assert torch.equal(mtl_loss(cls, reg, t, w, kl, kt), trk_loss(cls, reg, t, w))

    def test_additive_arithmetic(self):
        t, cls, reg, kt, _ = self._parts(10)
        kl = torch.zeros(1, 127, 127)  # kpt term is ln 2
        w = LossWeights(lambda_k=1.0)
        got = float(mtl_loss(cls, reg, t, w, kl, kt))
        want = float(trk_loss(cls, reg, t, w)) + math.log(2)
        assert got == pytest.approx(want, rel=1e-6)

    def test_monotone_in_lambda_k(self):
        t, cls, reg, kt, kl = self._parts(11)
        vals = [
            float(mtl_loss(cls, reg, t, LossWeights(lambda_k=lk), kl, kt))
            for lk in (0.2, 0.4, 0.6, 0.8, 1.0)
        ]
        assert vals == sorted(vals)

    def test_missing_kpt_inputs_rejected(self):
        t, cls, reg, _, _ = self._parts(12)
        with pytest.raises(ConfigError):
            mtl_loss(cls, reg, t, LossWeights(lambda_k=0.5))


class TestLossGradients:
    def test_cls_grad_matches_fd(self):
        t = random_targets(13)
        torch.manual_seed(13)
        logits = torch.randn(10, 17, 17, dtype=torch.float64)
        check_grad_against_fd(lambda x: cls_loss(x, t), logits, n_coords=8, seed=0)

    def test_reg_grad_matches_fd(self):
        t = random_targets(14)
        torch.manual_seed(14)
        pred = torch.randn(20, 17, 17, dtype=torch.float64)
        # keep FD probes away from the |u| = 1 kink
        check_grad_against_fd(lambda x: reg_loss(x, t), pred, n_coords=8, seed=1)

    def test_kpt_grad_matches_fd(self):
        kt = make_keypoint_target(np.array([[40.0, 50.0, 2.0], [90.0, 30.0, 1.0]]))
        torch.manual_seed(15)
        logits = torch.randn(2, 127, 127, dtype=torch.float64)
        check_grad_against_fd(lambda x: kpt_loss(x, kt), logits, n_coords=8, seed=2)

    def test_mtl_grad_matches_fd(self):
        t = random_targets(16)
        kt = make_keypoint_target(np.array([[40.0, 50.0, 2.0]]))
        torch.manual_seed(16)
        cls = torch.randn(10, 17, 17, dtype=torch.float64)
        reg = torch.randn(20, 17, 17, dtype=torch.float64)
        kl = torch.randn(1, 127, 127, dtype=torch.float64)
        w = LossWeights(lambda_k=0.7)

        def fn(x):
            return mtl_loss(cls, reg, t, w, x, kt) + trk_loss(cls, reg, t, w)

        check_grad_against_fd(fn, kl, n_coords=6, seed=3)
