"""Diffusion math: schedules, forward marginals, posterior vs. simulation."""

import numpy as np
import pytest

from hsifuse import diffusion as DF
from hsifuse.tensor import ShapeError, Tensor, grad_check


class TestSchedule:
    def test_zero_betas_keep_alpha_bar_one(self):
        sched = DF.NoiseSchedule.from_betas(np.zeros(5))
        np.testing.assert_array_equal(sched.alpha_bar, np.ones(6))

    def test_hand_product(self):
        sched = DF.NoiseSchedule.from_betas([0.1, 0.2])
        np.testing.assert_allclose(sched.alpha[1:], [0.9, 0.8])
        np.testing.assert_allclose(sched.alpha_bar[1:], [0.9, 0.72])

    def test_default_terminal_nearly_isotropic(self):
        sched = DF.build_schedule(500)
        # oracle: direct product evaluation
        direct = np.prod(1.0 - np.linspace(1e-4, 0.02, 500))
        assert sched.alpha_bar[500] == pytest.approx(direct, rel=1e-12)
        assert sched.alpha_bar[500] < 0.01

    def test_alpha_bar_matches_product_and_decreases(self):
        sched = DF.build_schedule(100, 1e-3, 0.05)
        prod = 1.0
        for t in range(1, 101):
            prod *= sched.alpha[t]
            assert abs(sched.alpha_bar[t] - prod) < 1e-12
        assert np.all(np.diff(sched.alpha_bar[0:]) < 0)

    def test_invalid_ranges(self):
        with pytest.raises(ValueError):
            DF.build_schedule(0)
        with pytest.raises(ValueError):
            DF.build_schedule(10, 0.5, 0.2)
        with pytest.raises(ValueError):
            DF.build_schedule(10, 0.0, 0.2)

    def test_csv_dump(self, tmp_path):
        sched = DF.build_schedule(3, 0.1, 0.3)
        DF.schedule_to_csv(sched, tmp_path / "s.csv")
        lines = (tmp_path / "s.csv").read_text().strip().splitlines()
        assert lines[0] == "t,beta,alpha,alpha_bar"
        assert len(lines) == 4


class TestForwardNoise:
    def test_t0_returns_x0(self):
        sched = DF.build_schedule(10, 0.1, 0.2)
        x0 = np.random.default_rng(0).standard_normal((3, 3))
        out = DF.forward_noise(x0, 0, np.zeros_like(x0), sched)
        np.testing.assert_array_equal(out, x0)

    def test_zero_eps_scales_by_sqrt_alpha_bar(self):
        sched = DF.NoiseSchedule.from_betas([0.19])
        x0 = np.ones((2, 2))
        out = DF.forward_noise(x0, 1, np.zeros_like(x0), sched)
        np.testing.assert_allclose(out, np.sqrt(0.81), rtol=1e-12)

    def test_hand_value(self):
        # alpha_bar = 0.75, x0 = 1, eps = 1  ->  sqrt(0.75) + 0.5 = 1.366025
        sched = DF.NoiseSchedule.from_betas([0.25])
        out = DF.forward_noise(np.array([1.0]), 1, np.array([1.0]), sched)
        assert out[0] == pytest.approx(1.3660254, abs=1e-6)

    def test_step_out_of_range(self):
        sched = DF.build_schedule(5, 0.1, 0.2)
        with pytest.raises(ValueError):
            DF.forward_noise(np.ones(1), 6, np.ones(1), sched)

    def test_marginal_statistics(self):
        # sample mean ~ sqrt(abar)*x0 and variance ~ (1-abar) at several steps
        sched = DF.build_schedule(500)
        rng = np.random.default_rng(42)
        n = 10**5
        x0 = np.array([0.3, 0.8, -0.4, 1.2])
        for t in (50, 100, 200, 400):
            eps = rng.standard_normal((n, 4))
            zt = DF.forward_noise(np.broadcast_to(x0, (n, 4)).copy(), t, eps, sched)
            ab = sched.alpha_bar[t]
            tol_mean = 4.0 * np.sqrt((1.0 - ab) / n)
            assert np.all(np.abs(zt.mean(axis=0) - np.sqrt(ab) * x0) < tol_mean)
            assert np.all(np.abs(zt.var(axis=0) / (1.0 - ab) - 1.0) < 0.05)


class TestFuseSteps:
    def test_single_zero_step_equals_input(self):
        sched = DF.build_schedule(10, 0.1, 0.2)
        x0 = np.random.default_rng(1).standard_normal((2, 7, 7, 3)).astype(np.float32)
        stack = DF.fuse_steps(x0, [0], sched, np.random.default_rng(0))
        np.testing.assert_array_equal(stack.data, x0)

    def test_default_steps_give_5x_channels(self):
        sched = DF.build_schedule(500)
        x0 = np.zeros((2, 7, 7, 3), dtype=np.float32)
        stack = DF.fuse_steps(x0, DF.DEFAULT_FUSE_STEPS, sched, np.random.default_rng(0))
        assert stack.data.shape == (2, 7, 7, 15)

    def test_seeded_reproducibility(self):
        sched = DF.build_schedule(100, 1e-3, 0.05)
        x0 = np.random.default_rng(2).standard_normal((3, 7, 7, 2)).astype(np.float32)
        a = DF.fuse_steps(x0, [0, 10, 50], sched, np.random.default_rng(77))
        b = DF.fuse_steps(x0, [0, 10, 50], sched, np.random.default_rng(77))
        assert a.data.tobytes() == b.data.tobytes()

    def test_block_zero_is_clean_patch(self):
        sched = DF.build_schedule(100, 1e-3, 0.05)
        x0 = np.random.default_rng(3).standard_normal((2, 7, 7, 2)).astype(np.float32)
        stack = DF.fuse_steps(x0, [0, 50], sched, np.random.default_rng(0))
        np.testing.assert_array_equal(stack.data[..., :2], x0)

    def test_unsorted_and_overflow_steps_rejected(self):
        sched = DF.build_schedule(10, 0.1, 0.2)
        x0 = np.zeros((1, 7, 7, 1), dtype=np.float32)
        with pytest.raises(ValueError):
            DF.fuse_steps(x0, [5, 2], sched, np.random.default_rng(0))
        with pytest.raises(ValueError):
            DF.fuse_steps(x0, [0, 11], sched, np.random.default_rng(0))


class TestPosterior:
    def test_t1_boundary(self):
        sched = DF.NoiseSchedule.from_betas([0.3, 0.2])
        z0 = np.array([0.4, -0.2])
        zt = np.array([5.0, 5.0])
        post = DF.posterior_params(z0, zt, 1, sched)
        np.testing.assert_allclose(post.mean, z0, atol=1e-12)
        assert post.var == 0.0

    def test_hand_coefficients_t2(self):
        # alpha = [0.9, 0.8]: coefficients 0.6776 / 0.3194, var 0.0714
        sched = DF.NoiseSchedule.from_betas([0.1, 0.2])
        post = DF.posterior_params(np.array([1.0]), np.array([0.0]), 2, sched)
        assert post.mean[0] == pytest.approx(0.6776, abs=5e-5)
        post2 = DF.posterior_params(np.array([0.0]), np.array([1.0]), 2, sched)
        assert post2.mean[0] == pytest.approx(0.3194, abs=5e-5)
        assert post.var == pytest.approx(0.0714, abs=5e-5)

    def test_t0_rejected(self):
        sched = DF.build_schedule(4, 0.1, 0.2)
        with pytest.raises(ValueError):
            DF.posterior_params(np.ones(1), np.ones(1), 0, sched)

    @pytest.mark.parametrize("t", [2, 10])
    def test_monte_carlo_bayes_oracle(self, t):
        # simulate the single-step chain, bucket on z_t, and compare conditional
        # moments against the closed form. The posterior mean is linear in z_t,
        # so comparing at the in-bucket mean of z_t is exact; the in-bucket
        # variance decomposes as coef_t^2 * var(z_t | bucket) + posterior var.
        sched = DF.build_schedule(10, 0.05, 0.3)
        rng = np.random.default_rng(123)
        n = 10**6
        z0 = 0.7
        z = np.full(n, z0)
        prev = None
        for step in range(1, t + 1):
            prev = z
            z = np.sqrt(sched.alpha[step]) * z + np.sqrt(sched.beta[step]) * rng.standard_normal(n)
        center = np.median(z)
        width = 0.05 * z.std()
        mask = np.abs(z - center) < width
        zt_in, zprev_in = z[mask], prev[mask]
        nb = mask.sum()
        assert nb > 1000

        ab_t, ab_p = sched.alpha_bar[t], sched.alpha_bar[t - 1]
        coef0 = np.sqrt(ab_p) * (1 - sched.alpha[t]) / (1 - ab_t)
        coeft = np.sqrt(sched.alpha[t]) * (1 - ab_p) / (1 - ab_t)
        post = DF.posterior_params(np.array([z0]), np.array([zt_in.mean()]), t, sched)
        np.testing.assert_allclose(post.mean[0], coef0 * z0 + coeft * zt_in.mean(), rtol=1e-12)

        se_mean = zprev_in.std() / np.sqrt(nb)
        assert abs(zprev_in.mean() - post.mean[0]) < 3 * se_mean

        var_adj = zprev_in.var() - coeft**2 * zt_in.var()
        se_var = zprev_in.var() * np.sqrt(2.0 / (nb - 1))
        assert abs(var_adj - post.var) < 3 * se_var

    def test_chain_consistency(self):
        # composing true single-step transitions matches the closed form
        sched = DF.build_schedule(10, 0.05, 0.3)
        rng = np.random.default_rng(7)
        n = 10**6
        z0 = -0.4
        z = np.full(n, z0)
        for t in range(1, 11):
            z = np.sqrt(sched.alpha[t]) * z + np.sqrt(sched.beta[t]) * rng.standard_normal(n)
            if t in (1, 5, 10):
                ab = sched.alpha_bar[t]
                se_mean = z.std() / np.sqrt(n)
                assert abs(z.mean() - np.sqrt(ab) * z0) < 3 * se_mean
                se_var = z.var() * np.sqrt(2.0 / (n - 1))
                assert abs(z.var() - (1 - ab)) < 3 * se_var


class TestDenoiseLoss:
    def test_identical_tensors_zero(self):
        x = Tensor(np.random.default_rng(0).standard_normal((3, 3)))
        assert DF.denoise_loss(x, Tensor(x.data.copy())).item() == 0.0

    def test_hand_value(self):
        out = DF.denoise_loss(Tensor([1.0, 1.0]), Tensor([0.0, 0.0]))
        assert out.item() == pytest.approx(0.5)

    def test_gradient_is_scaled_difference(self):
        rng = np.random.default_rng(5)
        out = Tensor(rng.standard_normal((2, 4)).astype(np.float64), requires_grad=True)
        target = Tensor(rng.standard_normal((2, 4)).astype(np.float64))
        DF.denoise_loss(out, target).backward()
        np.testing.assert_allclose(out.grad, (out.data - target.data) / 8, rtol=1e-12)
        err = grad_check(lambda o: DF.denoise_loss(o, target), [Tensor(out.data.copy())])
        assert err < 1e-8

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            DF.denoise_loss(Tensor(np.zeros((2, 2))), Tensor(np.zeros(4)))


class TestReverseSample:
    def test_degenerate_schedule_is_static(self):
        sched = DF.NoiseSchedule.from_betas(np.zeros(8))
        rng = np.random.default_rng(0)
        z_ref = np.random.default_rng(0).standard_normal((4, 4))
        out = DF.reverse_sample(lambda z, t: z, sched, (4, 4), rng)
        np.testing.assert_array_equal(out, z_ref)

    def test_fixed_target_denoiser_contracts(self):
        # a denoiser that always answers m must pull samples toward m
        sched = DF.build_schedule(50, 1e-3, 0.05)
        m = np.full((7, 7, 1), 0.6)
        mads = []

        def denoiser(z, t):
            mads.append(np.abs(z - m).mean())
            return np.broadcast_to(m, z.shape)

        out = DF.reverse_sample(denoiser, sched, (512, 7, 7, 1), np.random.default_rng(3))
        mads.append(np.abs(out - m).mean())
        tail = mads[-10:]
        assert all(a >= b for a, b in zip(tail, tail[1:]))

    def test_stride_not_dividing_T(self):
        sched = DF.build_schedule(10, 0.01, 0.05)
        visited = []
        DF.reverse_sample(lambda z, t: np.zeros_like(z), sched, (2, 2), np.random.default_rng(0), stride=4)
        # no crash: steps were 10 -> 6 -> 2 -> 0 with the last stride shortened

    def test_nonfinite_abort(self):
        sched = DF.build_schedule(5, 0.1, 0.2)

        def bad(z, t):
            return np.full_like(z, np.nan)

        with pytest.raises(ArithmeticError, match="diverged|non-finite"):
            DF.reverse_sample(bad, sched, (2, 2), np.random.default_rng(0))

    def test_trained_toy_denoiser_matches_data_mean(self):
        # train a two-parameter affine denoiser on corrupted constant images,
        # then check the marginal mean of full reverse chains against the
        # training-set mean
        from hsifuse.tensor import Param, Tensor
        from hsifuse.train import AdamState, adam_step

        sched = DF.build_schedule(50, 1e-3, 0.05)
        rng = np.random.default_rng(8)
        a = Param("a", np.array([0.5]))
        b = Param("b", np.array([0.0]))
        state = AdamState()
        data_mean = 0.5
        for _ in range(300):
            c = rng.uniform(0.3, 0.7, (64, 1, 1, 1))
            x0 = np.broadcast_to(c, (64, 7, 7, 1)).astype(np.float64)
            t = int(rng.integers(1, 51))
            zt = DF.forward_noise(x0, t, rng.standard_normal(x0.shape), sched)
            a.zero_grad()
            b.zero_grad()
            pred = Tensor(zt) * a + b
            loss = DF.denoise_loss(pred, Tensor(x0))
            loss.backward()
            adam_step([a, b], state, lr=0.05, weight_decay=0.0)

        def denoiser(z, t):
            return float(a.data[0]) * z + float(b.data[0])

        samples = DF.reverse_sample(denoiser, sched, (256, 7, 7, 1), np.random.default_rng(9))
        assert abs(samples.mean() - data_mean) < 0.1
