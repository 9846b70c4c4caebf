import numpy as np
import pytest
import torch

from cplab import cp, numerics, softcp
from cplab.softcp import SoftCpHyper, pinball, soft_indicator, soft_quantile


def t(x):
    return torch.tensor(x, dtype=torch.float64)


class TestHyper:
    def test_defaults(self):
        h = SoftCpHyper()
        assert (h.alpha, h.c_q, h.kappa, h.lam) == (0.1, 0.1, 0.1, 1.0)

    @pytest.mark.parametrize(
        "kwargs", [{"alpha": 0.0}, {"alpha": 1.0}, {"c_q": 0.0}, {"kappa": -1.0}, {"lam": -0.1}]
    )
    def test_validation(self, kwargs):
        with pytest.raises(ValueError):
            SoftCpHyper(**kwargs)


class TestPinball:
    def test_identical_points(self):
        assert pinball(t(2.0), t([2.0, 2.0, 2.0]), 0.1).item() == 0.0

    def test_hand_value(self):
        # 0.1*[2-1]_+ + 0.9*[3-2]_+ = 1.0
        assert abs(pinball(t(2.0), t([1.0, 3.0]), 0.1).item() - 1.0) < 1e-12

    def test_slope_below_min(self):
        zs = t([1.0, 2.0, 5.0])
        z = t(-4.0)
        eps = 1e-6
        slope = (pinball(z + eps, zs, 0.1) - pinball(z - eps, zs, 0.1)).item() / (2 * eps)
        assert abs(slope - (-(1 - 0.1) * 3)) < 1e-6

    def test_convex(self):
        zs = t(np.random.default_rng(0).uniform(size=8))
        a, b = t(0.2), t(0.7)
        mid = pinball((a + b) / 2, zs, 0.3)
        assert mid.item() <= (pinball(a, zs, 0.3) + pinball(b, zs, 0.3)).item() / 2 + 1e-12


class TestSoftQuantile:
    def test_constant_set(self):
        for c_q in (1e-6, 0.1, 10.0):
            assert abs(soft_quantile(t([3.5] * 6), 0.2, c_q).item() - 3.5) < 1e-12

    def test_sharp_limit_is_pinball_argmin(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            n = int(rng.integers(3, 9))
            alpha = 0.1 if (1 - 0.1) * n % 1 else 0.15
            if (1 - alpha) * n % 1 == 0:
                continue  # flat pinball minimum: quantile tie
            zs = t(rng.uniform(0, 5, n))
            rhos = [pinball(z, zs, alpha).item() for z in zs]
            expect = zs[int(np.argmin(rhos))].item()
            assert abs(soft_quantile(zs, alpha, 1e-6).item() - expect) < 1e-6

    def test_hand_case(self):
        # alpha=0.5 ties the pinball minimum between 2 and 3; the softmin
        # splits the weight evenly across the tied argmin set
        zs = t([1.0, 2.0, 3.0, 4.0])
        rhos = np.array([pinball(z, zs, 0.5).item() for z in zs])
        tied = zs.numpy()[rhos == rhos.min()]
        assert abs(soft_quantile(zs, 0.5, 1e-6).item() - tied.mean()) < 1e-6

    def test_bounded_and_permutation_invariant(self):
        rng = np.random.default_rng(2)
        for _ in range(30):
            zs = rng.uniform(-3, 3, 7)
            q = soft_quantile(t(zs), 0.2, 0.5).item()
            assert zs.min() - 1e-12 <= q <= zs.max() + 1e-12
            q2 = soft_quantile(t(rng.permutation(zs)), 0.2, 0.5).item()
            assert abs(q - q2) < 1e-12

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            soft_quantile(torch.zeros(0), 0.1, 0.1)

    def test_differentiable(self):
        zs = t([1.0, 2.0, 3.0]).requires_grad_(True)
        soft_quantile(zs, 0.3, 0.5).backward()
        assert torch.isfinite(zs.grad).all()


class TestSoftIndicator:
    def test_midpoint(self):
        assert soft_indicator(t(2.0), t(2.0), 0.1).item() == 0.5

    def test_closed_form(self):
        val = soft_indicator(t(1.0 - 0.3), t(1.0), 0.3).item()
        assert abs(val - 1.0 / (1.0 + np.exp(-1.0))) < 1e-12

    def test_sharp_limit(self):
        kappa = 1e-4
        assert soft_indicator(t(0.0), t(0.1), kappa).item() > 0.9999
        assert soft_indicator(t(0.2), t(0.1), kappa).item() < 1e-4

    def test_point_symmetry(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            r, tau, kappa = rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(0.01, 1)
            s1 = soft_indicator(t(r), t(tau), kappa).item()
            s2 = soft_indicator(t(2 * tau - r), t(tau), kappa).item()
            assert abs(s1 + s2 - 1.0) < 1e-12

    def test_strictly_decreasing(self):
        rs = torch.linspace(-3, 3, 50, dtype=torch.float64)
        vals = soft_indicator(rs, t(0.0), 0.5)
        assert (vals[1:] < vals[:-1]).all()


class TestLosses:
    def rand_mats(self, seed, T=3, K=4, m=8):
        rng = np.random.default_rng(seed)
        return t(rng.uniform(0.1, 3.0, size=(T, K, m)))

    def test_ineff_no_inclusions(self):
        # alpha=0.3 puts the quantile on the low cluster, far below each test score
        mats = t(np.concatenate([np.full((1, 4, 5), 0.1), np.full((1, 4, 1), 50.0)], axis=2))
        hyper = SoftCpHyper(alpha=0.3, kappa=0.05)
        assert softcp.loss_ineff(mats, hyper).item() < 1e-6

    def test_ineff_saturated(self):
        mats = t(np.concatenate([np.full((1, 4, 5), 50.0), np.full((1, 4, 1), 0.0)], axis=2))
        hyper = SoftCpHyper(kappa=0.05)
        assert abs(softcp.loss_ineff(mats, hyper).item() - 4.0) < 1e-6

    def test_ineff_gradient(self):
        hyper = SoftCpHyper()
        numerics.grad_check(
            lambda x: softcp.loss_ineff(x, hyper), self.rand_mats(4), rtol=1e-4
        )

    def test_class_extremes(self):
        hyper = SoftCpHyper(alpha=0.3, kappa=0.05)
        low = t(np.concatenate([np.full((1, 2, 5), 5.0), np.full((1, 2, 1), 0.0)], axis=2))
        assert softcp.loss_class(low, torch.tensor([0]), hyper).item() < 1e-6
        high = t(np.concatenate([np.full((1, 2, 5), 0.1), np.full((1, 2, 1), 50.0)], axis=2))
        assert abs(softcp.loss_class(high, torch.tensor([0]), hyper).item() - 1.0) < 1e-6

    def test_class_gradient(self):
        hyper = SoftCpHyper()
        labels = torch.tensor([0, 2, 1])
        numerics.grad_check(
            lambda x: softcp.loss_class(x, labels, hyper), self.rand_mats(5), rtol=1e-4
        )

    def test_class_label_range(self):
        with pytest.raises(ValueError):
            softcp.loss_class(self.rand_mats(6), torch.tensor([4, 0, 0]), SoftCpHyper())

    def test_total_lambda_zero(self):
        mats = self.rand_mats(7)
        labels = torch.tensor([0, 1, 2])
        h0 = SoftCpHyper(lam=0.0)
        assert torch.equal(softcp.loss_total(mats, labels, h0), softcp.loss_ineff(mats, h0))

    def test_total_is_sum(self):
        mats = self.rand_mats(8)
        labels = torch.tensor([3, 1, 0])
        h = SoftCpHyper(lam=1.0)
        total = softcp.loss_total(mats, labels, h)
        parts = softcp.loss_ineff(mats, h) + softcp.loss_class(mats, labels, h)
        assert abs(total.item() - parts.item()) < 1e-12

    def test_total_gradient_linearity(self):
        mats = self.rand_mats(9)
        labels = torch.tensor([0, 1, 2])
        h = SoftCpHyper(lam=0.7)
        x1 = mats.clone().requires_grad_(True)
        softcp.loss_total(x1, labels, h).backward()
        x2 = mats.clone().requires_grad_(True)
        softcp.loss_ineff(x2, h).backward()
        x3 = mats.clone().requires_grad_(True)
        softcp.loss_class(x3, labels, h).backward()
        assert torch.allclose(x1.grad, x2.grad + h.lam * x3.grad, atol=1e-12)


class TestLossScpSoft:
    def test_calibration_below_everything(self):
        hyper = SoftCpHyper(kappa=0.05, lam=0.0)
        cal = t([[0.1] * 6])
        test_rows = t([[50.0, 50.0, 50.0, 50.0]])
        loss = softcp.loss_scp_soft(cal, test_rows, torch.tensor([0]), hyper)
        assert loss.item() < 1e-6

    def test_threshold_is_soft_quantile_of_calibration(self):
        hyper = SoftCpHyper(kappa=1e-4, lam=0.0)
        rng = np.random.default_rng(10)
        cal = rng.uniform(1.0, 2.0, size=7)
        tau = soft_quantile(t(cal), hyper.alpha, hyper.c_q).item()
        rows = t([[tau - 1.0, tau + 1.0, tau - 1.0, tau + 1.0]])
        loss = softcp.loss_scp_soft(t(cal[None]), rows, torch.tensor([0]), hyper)
        assert abs(loss.item() - 2.0) < 1e-3  # exactly the two labels below tau

    def test_gradient(self):
        rng = np.random.default_rng(11)
        hyper = SoftCpHyper()
        cal = t(rng.uniform(0.5, 2.0, size=(2, 6)))
        labels = torch.tensor([1, 3])

        def f(x):
            return softcp.loss_scp_soft(x[:, :6], x[:, 6:], labels, hyper)

        packed = torch.cat([cal, t(rng.uniform(0.5, 2.0, size=(2, 4)))], dim=1)
        numerics.grad_check(f, packed, rtol=1e-4)


def test_soft_hard_consistency_small():
    rng = np.random.default_rng(12)
    alpha = 0.1
    sizes = [m for m in range(4, 13) if (1 - alpha) * m % 1 != 0]
    for _ in range(100):
        m = int(rng.choice(sizes))
        scores = rng.uniform(0, 5, size=(4, m))
        hard = cp.fcp_predict(scores, alpha)
        st_ = t(scores)
        tau = soft_quantile(st_, alpha, 1e-5)
        soft_members = {
            y for y in range(4)
            if soft_indicator(st_[y, -1], tau[y], 1e-5).item() > 0.5
        }
        near_tie = {
            y for y in range(4) if abs(scores[y, -1] - hard.thresholds[y]) < 1e-9
        }
        assert soft_members - near_tie == hard.members - near_tie
