import math

import pytest
import torch

from maskmotion.losses import LossWeights, dice_loss, focal_loss, mask_loss


def grid_with_fg(n_fg, size=8, value=1.0):
    t = torch.zeros(size, size, dtype=torch.float64)
    t.view(-1)[:n_fg] = value
    return t


class TestDice:
    def test_perfect_overlap(self):
        t = grid_with_fg(4)
        assert dice_loss(t, t).item() == pytest.approx(0.0, abs=1e-12)

    def test_disjoint(self):
        pred = grid_with_fg(4)
        target = torch.zeros(8, 8, dtype=torch.float64)
        target.view(-1)[10:14] = 1.0
        # 1 - (0 + 1)/(4 + 4 + 1)
        assert dice_loss(pred, target).item() == pytest.approx(1 - 1 / 9, abs=1e-12)

    def test_half_overlap(self):
        pred = grid_with_fg(4)
        target = torch.zeros(8, 8, dtype=torch.float64)
        target.view(-1)[2:6] = 1.0
        # 2 shared pixels: 1 - (4 + 1)/(4 + 4 + 1)
        assert dice_loss(pred, target).item() == pytest.approx(1 - 5 / 9, abs=1e-12)

    def test_range_and_permutation_symmetry(self):
        g = torch.Generator().manual_seed(0)
        for _ in range(50):
            pred = torch.rand(8, 8, dtype=torch.float64, generator=g)
            target = (torch.rand(8, 8, generator=g) < 0.4).to(torch.float64)
            v = dice_loss(pred, target).item()
            assert 0.0 <= v <= 1.0
            perm = torch.randperm(64, generator=g)
            vp = dice_loss(pred.view(-1)[perm].view(8, 8), target.view(-1)[perm].view(8, 8)).item()
            assert vp == pytest.approx(v, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            dice_loss(torch.zeros(3, 3), torch.zeros(4, 4))


class TestFocal:
    def test_single_confident_pixel(self):
        # single fg pixel with pred 0.9 on 1x1 grid: 0.25 * 0.1^2 * (-ln 0.9)
        pred = torch.tensor([[0.9]], dtype=torch.float64)
        target = torch.tensor([[1.0]], dtype=torch.float64)
        expected = 0.25 * 0.01 * (-math.log(0.9))
        assert focal_loss(pred, target).item() == pytest.approx(expected, rel=1e-9)
        assert expected == pytest.approx(2.634e-4, rel=1e-3)

    def test_exact_prediction_near_zero(self):
        target = (torch.rand(8, 8, generator=torch.Generator().manual_seed(1)) < 0.5).to(torch.float64)
        assert focal_loss(target, target).item() <= 1e-5

    def test_uniform_half_reduces_to_weighted_ce(self):
        pred = torch.full((4, 4), 0.5, dtype=torch.float64)
        target = (torch.rand(4, 4, generator=torch.Generator().manual_seed(2)) < 0.5).to(torch.float64)
        v = focal_loss(pred, target, gamma=0.0, alpha=0.5).item()
        assert v == pytest.approx(0.5 * math.log(2), rel=1e-12)

    def test_nonnegative(self):
        g = torch.Generator().manual_seed(3)
        for _ in range(30):
            pred = torch.rand(8, 8, dtype=torch.float64, generator=g)
            target = (torch.rand(8, 8, generator=g) < 0.5).to(torch.float64)
            assert focal_loss(pred, target).item() >= 0.0


class TestMaskLoss:
    def test_perfect_prediction(self):
        t = grid_with_fg(6)
        assert mask_loss(t, t).item() == pytest.approx(0.0, abs=1e-5)

    def test_degenerate_focal_weight(self):
        g = torch.Generator().manual_seed(4)
        pred = torch.rand(8, 8, dtype=torch.float64, generator=g)
        target = (torch.rand(8, 8, generator=g) < 0.5).to(torch.float64)
        w = LossWeights(lambda_focal=0.0, lambda_dice=5.0)
        assert mask_loss(pred, target, w).item() == pytest.approx(
            5.0 * dice_loss(pred, target).item(), abs=1e-12)

    def test_composes_components(self):
        pred = grid_with_fg(4)
        target = torch.zeros(8, 8, dtype=torch.float64)
        target.view(-1)[2:6] = 1.0
        w = LossWeights()
        expected = 5.0 * (1 - 5 / 9) + focal_loss(pred, target).item()
        assert mask_loss(pred, target, w).item() == pytest.approx(expected, rel=1e-12)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(lambda_dice=-1.0)


class TestGradients:
    @pytest.mark.parametrize("fn_name", ["dice", "focal", "mask"])
    def test_matches_central_differences(self, fn_name):
        fns = {
            "dice": dice_loss,
            "focal": focal_loss,
            "mask": lambda p, t: mask_loss(p, t, LossWeights()),
        }
        fn = fns[fn_name]
        g = torch.Generator().manual_seed(5)
        h = 1e-4
        for _ in range(5):
            pred0 = torch.rand(8, 8, dtype=torch.float64, generator=g) * 0.9 + 0.05
            target = (torch.rand(8, 8, generator=g) < 0.5).to(torch.float64)
            pred = pred0.clone().requires_grad_(True)
            fn(pred, target).backward()
            idx = torch.randint(0, 64, (12,), generator=g)
            for flat in idx.tolist():
                r, c = divmod(flat, 8)
                pp = pred0.clone(); pp[r, c] += h
                pm = pred0.clone(); pm[r, c] -= h
                fd = (fn(pp, target) - fn(pm, target)).item() / (2 * h)
                assert fd == pytest.approx(pred.grad[r, c].item(), rel=1e-3, abs=1e-10)
