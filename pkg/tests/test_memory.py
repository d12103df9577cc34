import math

import pytest
import torch

from maskmotion.memory import MemoryBank


def bank_with_rows(rows):
    rows = torch.as_tensor(rows, dtype=torch.float64)
    bank = MemoryBank(size_c=rows.shape[0], length_l=rows.shape[1])
    with torch.no_grad():
        bank.entries.copy_(rows)
    return bank


class TestAddress:
    def test_axis_aligned_rows(self):
        # rows (1,0),(0,1), z=(2,0): cosines 1 and 0 -> softmax (e, 1)/(e+1)
        bank = bank_with_rows([[1.0, 0.0], [0.0, 1.0]])
        w = bank.address(torch.tensor([2.0, 0.0], dtype=torch.float64))
        e = math.e
        assert w[0].item() == pytest.approx(e / (e + 1), abs=1e-12)
        assert w[1].item() == pytest.approx(1 / (e + 1), abs=1e-12)

    def test_symmetric_query(self):
        bank = bank_with_rows([[1.0, 0.0], [0.0, 1.0]])
        w = bank.address(torch.tensor([1.0, 1.0], dtype=torch.float64))
        assert w[0].item() == pytest.approx(0.5, abs=1e-12)
        assert w[1].item() == pytest.approx(0.5, abs=1e-12)

    def test_weights_sum_to_one(self):
        g = torch.Generator().manual_seed(7)
        for _ in range(50):
            bank = MemoryBank(size_c=6, length_l=5, generator=g)
            z = torch.randn(5, dtype=torch.float64, generator=g)
            w = bank.address(z)
            assert (w >= 0).all()
            assert w.sum().item() == pytest.approx(1.0, abs=1e-6)

    def test_scale_invariance(self):
        g = torch.Generator().manual_seed(8)
        bank = MemoryBank(size_c=10, length_l=8, generator=g)
        z = torch.randn(8, dtype=torch.float64, generator=g)
        w = bank.address(z)
        for alpha in (0.5, 3.0, 1e-3, 1e3):
            w2 = bank.address(alpha * z)
            assert torch.allclose(w, w2, atol=1e-9, rtol=0)

    def test_zero_norm_rejected(self):
        bank = MemoryBank(size_c=3, length_l=4)
        with pytest.raises(ValueError, match="zero-norm"):
            bank.address(torch.zeros(4, dtype=torch.float64))

    def test_length_mismatch_rejected(self):
        bank = MemoryBank(size_c=3, length_l=4)
        with pytest.raises(ValueError):
            bank.address(torch.ones(5, dtype=torch.float64))

    def test_batched_matches_single(self):
        g = torch.Generator().manual_seed(9)
        bank = MemoryBank(size_c=5, length_l=6, generator=g)
        zs = torch.randn(4, 6, dtype=torch.float64, generator=g)
        batched = bank.address(zs)
        for i in range(4):
            assert torch.allclose(batched[i], bank.address(zs[i]), atol=1e-12, rtol=0)


class TestRetrieve:
    def test_one_hot_returns_row(self):
        g = torch.Generator().manual_seed(10)
        bank = MemoryBank(size_c=7, length_l=5, generator=g)
        for i in range(7):
            w = torch.zeros(7, dtype=torch.float64)
            w[i] = 1.0
            assert torch.equal(bank.retrieve(w), bank.entries[i].detach())

    def test_uniform_mean(self):
        bank = bank_with_rows([[2.0, 0.0], [0.0, 2.0]])
        out = bank.retrieve(torch.tensor([0.5, 0.5], dtype=torch.float64))
        assert torch.allclose(out, torch.tensor([1.0, 1.0], dtype=torch.float64))

    def test_weighted_sum(self):
        bank = bank_with_rows([[1.0, 0.0], [0.0, 1.0]])
        w = torch.tensor([0.7311, 0.2689], dtype=torch.float64)
        assert torch.allclose(bank.retrieve(w), w)

    def test_linearity(self):
        g = torch.Generator().manual_seed(11)
        bank = MemoryBank(size_c=6, length_l=4, generator=g)
        for _ in range(20):
            w1 = torch.softmax(torch.randn(6, dtype=torch.float64, generator=g), 0)
            w2 = torch.softmax(torch.randn(6, dtype=torch.float64, generator=g), 0)
            lam = torch.rand(1, dtype=torch.float64, generator=g).item()
            lhs = bank.retrieve(lam * w1 + (1 - lam) * w2)
            rhs = lam * bank.retrieve(w1) + (1 - lam) * bank.retrieve(w2)
            assert torch.allclose(lhs, rhs, atol=1e-6)

    def test_length_mismatch_rejected(self):
        bank = MemoryBank(size_c=3, length_l=4)
        with pytest.raises(ValueError):
            bank.retrieve(torch.ones(4, dtype=torch.float64))


class TestFreeze:
    def test_frozen_entries_survive_optimizer_steps(self):
        g = torch.Generator().manual_seed(12)
        bank = MemoryBank(size_c=4, length_l=3, generator=g)
        bank.set_frozen(True)
        opt = torch.optim.Adam(bank.parameters(), lr=0.1)
        before = bank.entries.detach().clone()
        z = torch.randn(3, dtype=torch.float64, generator=g, requires_grad=True)
        for _ in range(100):
            opt.zero_grad()
            loss = bank.lookup(z).sum()
            loss.backward()
            opt.step()
        assert torch.equal(bank.entries.detach(), before)

    def test_unfrozen_entries_move(self):
        g = torch.Generator().manual_seed(13)
        bank = MemoryBank(size_c=4, length_l=3, generator=g)
        bank.set_frozen(False)
        opt = torch.optim.Adam(bank.parameters(), lr=0.1)
        before = bank.entries.detach().clone()
        z = torch.randn(3, dtype=torch.float64, generator=g)
        opt.zero_grad()
        bank.lookup(z).sum().backward()
        opt.step()
        assert not torch.equal(bank.entries.detach(), before)

    def test_gradient_flows_through_frozen_bank(self):
        g = torch.Generator().manual_seed(14)
        bank = MemoryBank(size_c=4, length_l=3, generator=g)
        bank.set_frozen(True)
        # upstream "encoder": a single linear map producing the latent
        weight = torch.randn(3, 3, dtype=torch.float64, generator=g, requires_grad=True)
        x = torch.randn(3, dtype=torch.float64, generator=g)
        loss = bank.lookup(weight @ x).sum()
        loss.backward()
        assert weight.grad is not None
        assert weight.grad.abs().sum().item() > 0
        # finite-difference check on one upstream entry
        h = 1e-6
        with torch.no_grad():
            wp = weight.detach().clone(); wp[0, 0] += h
            wm = weight.detach().clone(); wm[0, 0] -= h
            fd = (bank.lookup(wp @ x).sum() - bank.lookup(wm @ x).sum()).item() / (2 * h)
        assert fd == pytest.approx(weight.grad[0, 0].item(), rel=1e-5, abs=1e-9)


class TestGradients:
    def test_composite_matches_finite_differences(self):
        # small bank: c=4, l=8; central differences, rel tol 1e-3
        g = torch.Generator().manual_seed(15)
        bank = MemoryBank(size_c=4, length_l=8, generator=g)
        z0 = torch.randn(8, dtype=torch.float64, generator=g)
        probe = torch.randn(8, dtype=torch.float64, generator=g)

        def f(bank_entries, z):
            rn = bank_entries.norm(dim=1, keepdim=True)
            cos = (z / z.norm()) @ (bank_entries / rn).T
            w = torch.softmax(cos, 0)
            return (w @ bank_entries) @ probe

        z = z0.clone().requires_grad_(True)
        entries = bank.entries.detach().clone().requires_grad_(True)
        out = f(entries, z)
        out.backward()

        h = 1e-4
        for i in range(8):
            zp = z0.clone(); zp[i] += h
            zm = z0.clone(); zm[i] -= h
            fd = (f(entries.detach(), zp) - f(entries.detach(), zm)).item() / (2 * h)
            assert fd == pytest.approx(z.grad[i].item(), rel=1e-3, abs=1e-8)
        for r in range(4):
            for c in range(0, 8, 3):
                ep = entries.detach().clone(); ep[r, c] += h
                em = entries.detach().clone(); em[r, c] -= h
                fd = (f(ep, z0) - f(em, z0)).item() / (2 * h)
                assert fd == pytest.approx(entries.grad[r, c].item(), rel=1e-3, abs=1e-8)


class TestRowGuard:
    def test_degenerate_row_restored(self):
        bank = MemoryBank(size_c=3, length_l=4)
        with torch.no_grad():
            bank.entries[1] = 0.0
        fixed = bank.enforce_nonzero_rows()
        assert fixed == 1
        assert bank.entries[1].norm().item() > 0
        # addressing is well-defined again
        w = bank.address(torch.ones(4, dtype=torch.float64))
        assert w.sum().item() == pytest.approx(1.0, abs=1e-9)

    def test_healthy_bank_untouched(self):
        g = torch.Generator().manual_seed(16)
        bank = MemoryBank(size_c=5, length_l=4, generator=g)
        before = bank.entries.detach().clone()
        assert bank.enforce_nonzero_rows() == 0
        assert torch.equal(bank.entries.detach(), before)
