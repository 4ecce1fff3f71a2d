import numpy as np
import pytest
import torch

from skipforge.scheduler import (
    CLEAN_T,
    SamplerConfig,
    ScheduleError,
    StepGrid,
    add_noise,
    cfg_combine,
    ddim_invert,
    ddim_step,
    linear_beta_schedule,
    sample,
)
from skipforge.unet import Conditioning, PASSTHROUGH


@pytest.fixture(scope="module")
def schedule():
    return linear_beta_schedule(1000)


class TestSchedule:
    def test_default_schedule_invariants(self, schedule):
        assert schedule.T == 1000
        assert np.all(schedule.betas > 0) and np.all(schedule.betas < 1)
        assert np.all(np.diff(schedule.alphas_cumprod) < 0)
        assert schedule.alphas_cumprod[0] == pytest.approx(1 - 1e-4)

    def test_single_entry(self):
        s = linear_beta_schedule(1, 1e-4, 1e-4)
        assert s.T == 1 and len(s.betas) == 1

    def test_rejects_bad_range(self):
        with pytest.raises(ScheduleError):
            linear_beta_schedule(10, 0.02, 1e-4)
        with pytest.raises(ScheduleError):
            linear_beta_schedule(10, 0.0, 0.02)

    def test_alpha_bar_bounds(self, schedule):
        assert schedule.alpha_bar(CLEAN_T) == 1.0
        with pytest.raises(ScheduleError):
            schedule.alpha_bar(1000)


class TestStepGrid:
    def test_grid_is_pure_function(self):
        assert StepGrid.build(1000, 50) == StepGrid.build(1000, 50)

    def test_descending_and_capped(self):
        g = StepGrid.build(1000, 50)
        assert len(g) == 50
        assert g.times[0] == 999 and g.times[-1] == 20
        assert all(a > b for a, b in zip(g.times, g.times[1:]))

    def test_one_step_grid(self):
        assert StepGrid.build(1000, 1).times == (999,)

    def test_bounds(self):
        with pytest.raises(ScheduleError):
            StepGrid.build(1000, 0)
        with pytest.raises(ScheduleError):
            StepGrid.build(1000, 1001)


class TestAddNoise:
    def test_t0_nearly_identity(self, schedule):
        x0 = torch.randn(1, 3, 8, 8)
        out = add_noise(x0, torch.zeros_like(x0), 0, schedule)
        coef = float(np.sqrt(schedule.alphas_cumprod[0]))
        assert coef == pytest.approx(0.99995, abs=1e-5)
        assert torch.allclose(out, coef * x0)

    def test_zero_eps_exact(self, schedule):
        x0 = torch.randn(2, 3, 8, 8)
        out = add_noise(x0, torch.zeros_like(x0), 123, schedule)
        assert torch.equal(out, float(np.sqrt(schedule.alphas_cumprod[123])) * x0)

    def test_pure_noise_end(self, schedule):
        ones = torch.ones(1, 3, 4, 4)
        out = add_noise(torch.zeros_like(ones), ones, 999, schedule)
        expected = float(np.sqrt(1 - schedule.alphas_cumprod[999]))
        assert torch.allclose(out, expected * ones)


class TestCfgCombine:
    def test_scale_one_is_cond_exactly(self):
        u, c = torch.randn(4), torch.randn(4)
        assert cfg_combine(u, c, 1.0) is c

    def test_scale_zero_is_uncond_exactly(self):
        u, c = torch.randn(4), torch.randn(4)
        assert cfg_combine(u, c, 0.0) is u

    def test_arithmetic(self):
        u = torch.tensor([1.0])
        c = torch.tensor([3.0])
        assert cfg_combine(u, c, 7.5).item() == pytest.approx(16.0)


class TestDdimStep:
    def test_identity_when_equal_times(self, schedule):
        x = torch.randn(1, 3, 8, 8)
        assert ddim_step(torch.randn_like(x), x, 500, 500, schedule) is x

    def test_rejects_ascending(self, schedule):
        x = torch.randn(1, 3, 8, 8)
        with pytest.raises(ScheduleError):
            ddim_step(torch.randn_like(x), x, 100, 200, schedule)

    def test_deterministic(self, schedule):
        x = torch.randn(1, 3, 8, 8)
        eps = torch.randn_like(x)
        a = ddim_step(eps, x, 500, 400, schedule)
        b = ddim_step(eps, x, 500, 400, schedule)
        assert torch.equal(a, b)

    def test_eta_requires_rng(self, schedule):
        x = torch.randn(1, 3, 8, 8)
        with pytest.raises(ScheduleError):
            ddim_step(torch.randn_like(x), x, 500, 400, schedule, eta=0.5)

    def test_true_eps_oracle_two_step_grid(self, schedule):
        # stub model knows the exact noise; the chain must invert add_noise
        torch.manual_seed(0)
        for _ in range(5):
            x0 = torch.randn(1, 3, 8, 8, dtype=torch.float64)
            eps = torch.randn_like(x0)
            t2, t1 = StepGrid.build(1000, 2).times
            x = add_noise(x0, eps, t2, schedule)
            x = ddim_step(eps, x, t2, t1, schedule)
            x = ddim_step(eps, x, t1, CLEAN_T, schedule)
            assert float((x - x0).abs().max()) <= 1e-5


class _AllPassthrough:
    def tap_modes(self, step_index, t):
        return {4: PASSTHROUGH, "h": PASSTHROUGH}

    def on_recorded(self, step_index, t, bundle):
        raise AssertionError("nothing should be recorded")


class TestSample:
    def test_injector_passthrough_identical(self, tiny_model, schedule):
        z = torch.randn(1, 3, 32, 32, generator=torch.Generator().manual_seed(1))
        cfg = SamplerConfig(num_steps=4, cfg_scale=7.5)
        cond = Conditioning(3)
        a, _ = sample(tiny_model, z, cond, cfg, schedule)
        b, _ = sample(tiny_model, z, cond, cfg, schedule, injector=_AllPassthrough())
        assert torch.equal(a, b)

    def test_single_step(self, tiny_model, schedule):
        z = torch.randn(1, 3, 32, 32, generator=torch.Generator().manual_seed(2))
        out, traj = sample(tiny_model, z, Conditioning(0), SamplerConfig(num_steps=1), schedule)
        assert torch.isfinite(out).all()
        assert len(traj) == 2

    def test_reproducible_from_seed(self, tiny_model, schedule):
        cfg = SamplerConfig(num_steps=3, cfg_scale=7.5)
        outs = []
        for _ in range(2):
            z = torch.randn(1, 3, 32, 32, generator=torch.Generator().manual_seed(7))
            out, _ = sample(tiny_model, z, Conditioning(5), cfg, schedule)
            outs.append(out)
        assert torch.equal(outs[0], outs[1])

    def test_trajectory_lengths(self, tiny_model, schedule):
        z = torch.randn(1, 3, 32, 32)
        _, traj = sample(tiny_model, z, Conditioning(0), SamplerConfig(num_steps=5), schedule)
        assert len(traj) == 6


class TestInvert:
    def test_trajectory_and_shapes(self, tiny_model, schedule):
        x0 = torch.randn(1, 3, 32, 32) * 0.5
        traj = ddim_invert(tiny_model, x0, Conditioning(1), 4, schedule)
        assert len(traj) == 5
        assert traj[-1].shape == x0.shape

    def test_single_step_inversion(self, tiny_model, schedule):
        x0 = torch.randn(1, 3, 32, 32) * 0.5
        traj = ddim_invert(tiny_model, x0, Conditioning(1), 1, schedule)
        assert len(traj) == 2 and torch.isfinite(traj[-1]).all()

    def test_rejects_bad_steps(self, tiny_model, schedule):
        x0 = torch.randn(1, 3, 32, 32)
        with pytest.raises(ScheduleError):
            ddim_invert(tiny_model, x0, Conditioning(1), 0, schedule)
