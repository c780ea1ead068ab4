import math

import pytest
import torch

from jointdiff.schedule import (build_schedule, q_sample, ddpm_reverse_step,
                                ddim_reverse_step, ddim_stride, joint_noise_loss)


class TestBuildSchedule:
    def test_invariants_paper_schedule(self, sched):
        assert sched.T == 1000
        assert torch.all(sched.betas > 0) and torch.all(sched.betas < 1)
        assert torch.all(sched.alpha_bars > 0) and torch.all(sched.alpha_bars <= 1)
        assert torch.all(sched.alpha_bars[1:] < sched.alpha_bars[:-1])
        assert sched.alpha_bar(1000) < 0.01

    def test_cumprod_relation_exact(self, sched):
        # abar_t = abar_{t-1} * alpha_t within one epsilon of float64
        lhs = sched.alpha_bars[1:]
        rhs = sched.alpha_bars[:-1] * sched.alphas[1:]
        assert torch.allclose(lhs, rhs, rtol=0, atol=1e-15)

    def test_single_step(self):
        s = build_schedule(1, 0.5, 0.5)
        assert s.alpha_bar(1) == pytest.approx(0.5, abs=0)

    def test_product_oracle(self):
        s = build_schedule(10, 0.1, 0.2)
        prod = 1.0
        for i in range(10):
            prod *= 1.0 - (0.1 + i * (0.2 - 0.1) / 9)
        assert s.alpha_bar(10) == pytest.approx(prod, rel=1e-12)

    @pytest.mark.parametrize("T,b0,b1", [
        (0, 0.1, 0.2), (10, 0.0, 0.2), (10, 0.1, 1.0),
        (10, float("nan"), 0.2), (10, 0.1, float("inf")), (10, 0.3, 0.2),
    ])
    def test_rejects_bad_args(self, T, b0, b1):
        with pytest.raises(ValueError):
            build_schedule(T, b0, b1)


class TestQSample:
    def test_zero_noise(self, sched):
        x0 = torch.randn(4, 5)
        out = q_sample(x0, 300, torch.zeros_like(x0), sched)
        assert torch.allclose(out, math.sqrt(sched.alpha_bar(300)) * x0)

    def test_terminal_step_mostly_noise(self, sched):
        x0 = torch.randn(16)
        eps = torch.randn(16)
        out = q_sample(x0, sched.T, eps, sched)
        bound = float(x0.norm()) * math.sqrt(sched.alpha_bar(sched.T)) + 1e-6
        assert float((out - eps).norm()) <= bound + float(eps.norm()) * 0.05

    def test_monte_carlo_variance(self, sched):
        # empirical variance at x0=0 matches 1-abar within 3 standard errors
        n = 100_000
        t = 400
        gen = torch.Generator().manual_seed(0)
        eps = torch.randn(n, generator=gen, dtype=torch.float64)
        out = q_sample(torch.zeros(n, dtype=torch.float64), t, eps, sched)
        var = float(out.var(unbiased=True))
        expected = 1.0 - sched.alpha_bar(t)
        se = expected * math.sqrt(2.0 / (n - 1))
        assert abs(var - expected) < 3 * se

    def test_stepwise_chain_matches_marginal(self):
        # simulate the per-step corruption chain and compare moments with
        # the closed-form marginal
        s = build_schedule(20, 0.01, 0.1)
        n = 100_000
        gen = torch.Generator().manual_seed(1)
        x = torch.ones(n, dtype=torch.float64)
        for t in range(1, 21):
            beta = float(s.betas[t - 1])
            x = math.sqrt(1 - beta) * x + math.sqrt(beta) * torch.randn(
                n, generator=gen, dtype=torch.float64)
        abar = s.alpha_bar(20)
        mean, var = float(x.mean()), float(x.var(unbiased=True))
        se_mean = math.sqrt((1 - abar) / n)
        se_var = (1 - abar) * math.sqrt(2.0 / (n - 1))
        assert abs(mean - math.sqrt(abar)) < 3 * se_mean
        assert abs(var - (1 - abar)) < 3 * se_var

    def test_shape_mismatch(self, sched):
        with pytest.raises(ValueError):
            q_sample(torch.zeros(3), 10, torch.zeros(4), sched)

    def test_t_out_of_range(self, sched):
        with pytest.raises(ValueError):
            q_sample(torch.zeros(3), 1001, torch.zeros(3), sched)


def _oracle_eps(x, x0, t, sched):
    ab = sched.alpha_bar(t)
    return (x - math.sqrt(ab) * x0) / math.sqrt(1 - ab)


class TestDdpmReverse:
    def test_roundtrip_with_oracle_model(self, sched):
        # a predictor returning the exact noise in its input recovers x0
        x0 = torch.tensor([1.0, -0.5, 2.0, 0.25], dtype=torch.float64)
        eps = torch.randn(4, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
        x = q_sample(x0, sched.T, eps, sched)
        for t in range(sched.T, 0, -1):
            x = ddpm_reverse_step(x, _oracle_eps(x, x0, t, sched), t, sched, None)
        assert torch.allclose(x, x0, atol=1e-9)

    def test_tiny_beta_is_near_identity(self):
        s = build_schedule(10, 1e-6, 1e-6)
        x = torch.randn(8, dtype=torch.float64)
        eps_hat = torch.randn(8, dtype=torch.float64)
        out = ddpm_reverse_step(x, eps_hat, 5, s, None)
        assert float((out - x).norm()) < 10 * 1e-6 ** 0.5 * float(eps_hat.norm())

    def test_scalar_oracle_T2(self):
        # independently coded scalar formula at T=2
        s = build_schedule(2, 0.1, 0.3)
        x_t, eps_hat, t = 0.7, -0.4, 2
        beta, alpha = 0.3, 0.7
        abar = 0.9 * 0.7
        expected = (x_t - beta / math.sqrt(1 - abar) * eps_hat) / math.sqrt(alpha)
        got = ddpm_reverse_step(torch.tensor([x_t]), torch.tensor([eps_hat]), t, s, None)
        assert float(got) == pytest.approx(expected, rel=1e-6)

    def test_noise_term_uses_posterior_variance(self, sched):
        x = torch.zeros(4)
        eh = torch.zeros(4)
        z = torch.ones(4)
        t = 500
        out = ddpm_reverse_step(x, eh, t, sched, z)
        assert torch.allclose(out, math.sqrt(float(sched.posterior_vars[t - 1])) * z)

    def test_z_ignored_at_t1(self, sched):
        x = torch.randn(4)
        out_a = ddpm_reverse_step(x, torch.zeros(4), 1, sched, torch.ones(4))
        out_b = ddpm_reverse_step(x, torch.zeros(4), 1, sched, None)
        assert torch.equal(out_a, out_b)


class TestDdimReverse:
    def test_identity_when_t_prev_equals_t(self, sched):
        x = torch.randn(4)
        assert torch.equal(ddim_reverse_step(x, torch.randn(4), 100, 100, sched), x)

    def test_exact_inversion_of_q_sample(self, sched):
        # with eps_hat = true noise, one step to t_prev=0 returns x0 exactly
        x0 = torch.randn(6, dtype=torch.float64)
        eps = torch.randn(6, dtype=torch.float64)
        for t in (1, 17, 500, 1000):
            x_t = q_sample(x0, t, eps, sched)
            assert torch.allclose(ddim_reverse_step(x_t, eps, t, 0, sched), x0, atol=1e-10)

    def test_dense_vs_strided_with_oracle_model(self, sched):
        x0 = torch.tensor([1.0, -0.5, 2.0, 0.25], dtype=torch.float64)
        eps = torch.randn(4, generator=torch.Generator().manual_seed(3), dtype=torch.float64)

        def run(ts):
            x = q_sample(x0, sched.T, eps, sched)
            for k, t in enumerate(ts):
                tp = ts[k + 1] if k + 1 < len(ts) else 0
                x = ddim_reverse_step(x, _oracle_eps(x, x0, t, sched), t, tp, sched)
            return x

        dense = run(list(range(sched.T, 0, -1)))
        strided = run(ddim_stride(sched.T, 50))
        rel = float((dense - strided).abs().max() / dense.abs().max())
        assert rel < 1e-3

    def test_rejects_increasing_t(self, sched):
        with pytest.raises(ValueError):
            ddim_reverse_step(torch.zeros(2), torch.zeros(2), 10, 20, sched)


class _PerfectModel:
    """Returns the exact noise that produced its input."""

    def __init__(self, x0_img, x0_txt, sched):
        self.x0_img, self.x0_txt, self.sched = x0_img, x0_txt, sched

    def __call__(self, xi, xt, t):
        t0 = int(t[0]) if torch.is_tensor(t) else t
        return (_oracle_eps(xi, self.x0_img, t0, self.sched),
                _oracle_eps(xt, self.x0_txt, t0, self.sched))


class TestJointLoss:
    def test_perfect_model_zero_loss(self, sched):
        xi, xt = torch.randn(2, 3, 4, 4), torch.randn(2, 5, 8)
        model = _PerfectModel(xi, xt, sched)
        loss = joint_noise_loss(model, xi, xt, 200, torch.randn_like(xi),
                                torch.randn_like(xt), sched)
        assert float(loss) == pytest.approx(0.0, abs=1e-10)

    def test_zero_model_loss_near_two(self, sched):
        # 1.0 per modality in expectation when the model predicts zeros
        gen = torch.Generator().manual_seed(5)
        xi = torch.zeros(64, 3, 8, 8)
        xt = torch.zeros(64, 6, 16)
        eps_i = torch.randn(xi.shape, generator=gen)
        eps_t = torch.randn(xt.shape, generator=gen)
        model = lambda a, b, t: (torch.zeros_like(a), torch.zeros_like(b))
        loss = float(joint_noise_loss(model, xi, xt, torch.full((64,), 100),
                                      eps_i, eps_t, sched))
        n = 64 * (3 * 8 * 8 + 6 * 16)
        se = math.sqrt(2.0 * 2 / n) * 3  # rough 3-sigma band on mean of chi2
        assert abs(loss - 2.0) < 5 * se + 0.1

    def test_modality_order_symmetric(self, sched):
        gen = torch.Generator().manual_seed(6)
        xi = torch.randn(2, 3, 4, 4, generator=gen)
        xt = torch.randn(2, 5, 8, generator=gen)
        ei = torch.randn(xi.shape, generator=gen)
        et = torch.randn(xt.shape, generator=gen)
        model_a = lambda a, b, t: (a * 0.1, b * 0.2)
        model_b = lambda b, a, t: (b * 0.2, a * 0.1)
        la = float(joint_noise_loss(model_a, xi, xt, 10, ei, et, sched))
        lb = float(joint_noise_loss(model_b, xt, xi, 10, et, ei, sched))
        assert la == pytest.approx(lb, rel=1e-6)

    def test_rejects_nonfinite(self, sched):
        xi = torch.full((1, 3, 4, 4), float("nan"))
        xt = torch.zeros(1, 5, 8)
        model = lambda a, b, t: (a, b)
        with pytest.raises(ValueError):
            joint_noise_loss(model, xi, xt, 10, torch.zeros_like(xi),
                             torch.zeros_like(xt), sched)

    def test_rejects_missing_modality(self, sched):
        with pytest.raises(ValueError):
            joint_noise_loss(lambda a, b, t: (a, b), torch.zeros(1, 3, 4, 4), None,
                             10, torch.zeros(1, 3, 4, 4), None, sched)
