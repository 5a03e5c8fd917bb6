import math

import numpy as np
import pytest
import torch

from selfsvd.core import FlowField, PatchMask
from selfsvd.errors import InvalidConfig, InvalidInput, NumericalError
from selfsvd.flow import BlockMatchingBackend
from selfsvd.losses import (
    LossWeights,
    gan_d_loss,
    gan_g_loss,
    rec_loss,
    reg_loss,
    total_loss,
)


def zero_flow(h=8, w=8):
    return FlowField(np.zeros((h, w), np.float32), np.zeros((h, w), np.float32))


def rel_err(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)


class TestRecLoss:
    def test_identical_zero(self, rng):
        target = torch.from_numpy(rng.random((8, 8, 3)))
        loss = rec_loss([target.clone()], target, flows=[zero_flow()])
        assert float(loss) == 0.0

    def test_uniform_offset(self, rng):
        target = torch.from_numpy((rng.random((8, 8, 3)) * 0.8))
        outputs = [target + 0.1, target + 0.1, target + 0.1]
        loss = rec_loss(outputs, target, flows=[zero_flow()] * 3)
        assert math.isclose(float(loss), 0.3, rel_tol=1e-9)  # 0.1 per frame, summed

    def test_shift_construction_alignment(self, rng):
        target = rng.random((32, 32, 3)).astype(np.float32)
        shifted = np.roll(target, -2, axis=1)  # output = target shifted left by 2
        loss = rec_loss(
            [torch.from_numpy(shifted.copy())],
            torch.from_numpy(target.copy()),
            flow_backend=BlockMatchingBackend(search_radius=4, block_size=8),
        )
        assert float(loss) < 1e-3

    def test_all_invalid_counts_and_contributes_zero(self, rng):
        target = torch.from_numpy(rng.random((8, 8, 3)))
        out = torch.from_numpy(rng.random((8, 8, 3)))
        far = FlowField(np.full((8, 8), 20.0, np.float32), np.zeros((8, 8), np.float32))
        counters = {}
        loss = rec_loss([out], target, flows=[far], counters=counters)
        assert float(loss) == 0.0
        assert counters["all_invalid_frames"] == 1

    def test_empty_outputs_rejected(self, rng):
        with pytest.raises(InvalidInput):
            rec_loss([], torch.zeros(8, 8, 3), flows=[])

    def test_gradient_matches_finite_differences(self, rng):
        target = torch.from_numpy(rng.random((8, 8, 3)))
        out = torch.from_numpy(rng.random((8, 8, 3))).requires_grad_(True)
        flow = FlowField(
            (rng.random((8, 8)) * 3 - 1.5).astype(np.float32),
            (rng.random((8, 8)) * 3 - 1.5).astype(np.float32),
        )
        loss = rec_loss([out], target, flows=[flow])
        loss.backward()
        grad = out.grad.clone()

        eps = 1e-6
        rng2 = np.random.default_rng(7)
        flat = [tuple(rng2.integers([8, 8, 3])) for _ in range(30)]
        with torch.no_grad():
            for idx in flat:
                base = out.detach().clone()
                plus, minus = base.clone(), base.clone()
                plus[idx] += eps
                minus[idx] -= eps
                lp = float(rec_loss([plus], target, flows=[flow]))
                lm = float(rec_loss([minus], target, flows=[flow]))
                fd = (lp - lm) / (2 * eps)
                assert rel_err(float(grad[idx]), fd) <= 1e-4 or (
                    abs(float(grad[idx])) < 1e-10 and abs(fd) < 1e-6
                )


class TestRegLoss:
    def test_zero_mask(self, rng):
        feats = torch.from_numpy(rng.random((1, 4, 8, 8)))
        mask = PatchMask(np.zeros((4, 4), np.uint8), patch_size=8)
        assert float(reg_loss(mask, feats)) == 0.0

    def test_all_ones_constant_features(self):
        feats = torch.full((1, 4, 8, 8), 0.5)
        mask = PatchMask(np.ones((4, 4), np.uint8), patch_size=8)
        assert math.isclose(float(reg_loss(mask, feats)), 0.5, rel_tol=1e-7)

    def test_half_masked_mean_over_full_tensor(self):
        feats = torch.ones(1, 3, 8, 8)
        grid = np.zeros((4, 4), np.uint8)
        grid[:2] = 1  # top half kept
        mask = PatchMask(grid, patch_size=8)
        assert math.isclose(float(reg_loss(mask, feats)), 0.5, rel_tol=1e-7)

    def test_one_homogeneous(self, rng):
        feats = torch.from_numpy(rng.random((2, 3, 8, 8)) - 0.5)
        mask = PatchMask((rng.random((4, 4)) > 0.4).astype(np.uint8), patch_size=8)
        base = float(reg_loss(mask, feats))
        scaled = float(reg_loss(mask, -3.5 * feats))
        assert math.isclose(scaled, 3.5 * base, rel_tol=1e-6)

    def test_none_mask_plain_mean(self, rng):
        feats = torch.from_numpy(rng.random((1, 3, 8, 8)) - 0.5)
        assert math.isclose(float(reg_loss(None, feats)), float(feats.abs().mean()), rel_tol=1e-7)

    def test_gradient_matches_finite_differences(self, rng):
        feats = torch.from_numpy(rng.random((1, 3, 8, 8)) + 0.1).requires_grad_(True)
        mask = PatchMask((rng.random((4, 4)) > 0.3).astype(np.uint8), patch_size=8)
        reg_loss(mask, feats).backward()
        grad = feats.grad.clone()
        eps = 1e-6
        rng2 = np.random.default_rng(3)
        for _ in range(25):
            idx = tuple(rng2.integers([1, 3, 8, 8]))
            with torch.no_grad():
                plus = feats.detach().clone()
                minus = feats.detach().clone()
                plus[idx] += eps
                minus[idx] -= eps
                fd = (float(reg_loss(mask, plus)) - float(reg_loss(mask, minus))) / (2 * eps)
            a = float(grad[idx])
            assert rel_err(a, fd) <= 1e-4 or (abs(a) < 1e-10 and abs(fd) < 1e-6)


class TestGanLosses:
    def test_generator_closed_forms(self):
        assert float(gan_g_loss(torch.ones(30, 30, dtype=torch.float64))) == 0.0
        val = float(gan_g_loss(torch.full((30, 30), 0.7, dtype=torch.float64)))
        assert abs(val - 0.045) <= 1e-9
        assert abs(float(gan_g_loss(torch.zeros(4, 4, dtype=torch.float64))) - 0.5) <= 1e-12

    def test_discriminator_closed_forms(self):
        ones = torch.ones(5, 5, dtype=torch.float64)
        zeros = torch.zeros(5, 5, dtype=torch.float64)
        assert float(gan_d_loss(ones, zeros)) == 0.0
        val = float(gan_d_loss(torch.full_like(ones, 0.8), torch.full_like(ones, 0.3)))
        assert abs(val - 0.065) <= 1e-9
        assert abs(float(gan_d_loss(torch.full_like(ones, 0.5), torch.full_like(ones, 0.5))) - 0.25) <= 1e-12

    def test_d_loss_minimized_at_real_one_fake_zero(self, rng):
        best = float(gan_d_loss(torch.ones(8, 8), torch.zeros(8, 8)))
        for _ in range(10):
            r = torch.from_numpy(rng.random((8, 8)))
            f = torch.from_numpy(rng.random((8, 8)))
            assert float(gan_d_loss(r, f)) >= best

    def test_gradient_matches_finite_differences(self, rng):
        scores = torch.from_numpy(rng.random((8, 8))).requires_grad_(True)
        gan_g_loss(scores).backward()
        grad = scores.grad
        eps = 1e-6
        for idx in [(0, 0), (3, 5), (7, 7)]:
            with torch.no_grad():
                plus = scores.detach().clone()
                minus = scores.detach().clone()
                plus[idx] += eps
                minus[idx] -= eps
                fd = (float(gan_g_loss(plus)) - float(gan_g_loss(minus))) / (2 * eps)
            assert rel_err(float(grad[idx]), fd) <= 1e-4


class TestTotalLoss:
    def test_weighted_sum(self):
        val = total_loss(1.0, 2.0, 0.5, LossWeights())
        assert abs(val - 1.6) <= 1e-9

    def test_zero_weights(self):
        assert total_loss(1.25, 9.0, 9.0, LossWeights(lambda_reg=0, lambda_gan=0)) == 1.25

    def test_all_zero(self):
        assert total_loss(0.0, 0.0, 0.0, LossWeights()) == 0.0

    def test_nan_rejected(self):
        with pytest.raises(NumericalError):
            total_loss(float("nan"), 0.0, 0.0, LossWeights())

    def test_monotone_in_reg_weight(self):
        hi = total_loss(1.0, 2.0, 0.5, LossWeights(lambda_reg=0.1))
        lo = total_loss(1.0, 2.0, 0.5, LossWeights(lambda_reg=0.01))
        assert lo <= hi

    def test_negative_weights_rejected(self):
        with pytest.raises(InvalidConfig):
            LossWeights(lambda_reg=-0.1)
