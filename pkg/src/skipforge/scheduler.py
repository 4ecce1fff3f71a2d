"""Noise schedule, DDIM sampling/inversion and classifier-free guidance.

Everything here is a pure function over an immutable schedule. Latents are
float32 torch tensors shaped (B, C, H, W); diffusion times are integers
indexing the beta array (t=0 least noisy, t=T-1 most noisy). Step grids are
shared verbatim between record and inject runs so that feature-cache keys
line up.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol, Sequence

import numpy as np
import torch

# sentinel time for the final DDIM update: "step to the clean image",
# i.e. alpha_bar treated as exactly 1
CLEAN_T = -1


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class DiffusionSchedule:
    """Beta schedule plus cached cumulative alpha products (float64)."""

    T: int
    betas: np.ndarray
    alphas_cumprod: np.ndarray

    def alpha_bar(self, t: int) -> float:
        if t == CLEAN_T:
            return 1.0
        if not 0 <= t < self.T:
            raise ScheduleError(f"diffusion time {t} outside [0, {self.T})")
        return float(self.alphas_cumprod[t])


def linear_beta_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> DiffusionSchedule:
    """Standard linear beta schedule with cached alpha-bar products."""
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas_cumprod = np.cumprod(1.0 - betas)
    sched = DiffusionSchedule(T=T, betas=betas, alphas_cumprod=alphas_cumprod)
    if not np.all(np.diff(alphas_cumprod) < 0) and T > 1:
        raise ScheduleError("alphas_cumprod not strictly decreasing")
    return sched


@dataclass(frozen=True)
class SamplerConfig:
    num_steps: int = 50
    cfg_scale: float = 7.5
    eta: float = 0.0

    def validate(self, T: int) -> None:
        if not 1 <= self.num_steps <= T:
            raise ScheduleError(f"num_steps {self.num_steps} outside [1, {T}]")
        if not 0.0 <= self.eta <= 1.0:
            raise ScheduleError(f"eta {self.eta} outside [0, 1]")


@dataclass(frozen=True)
class StepGrid:
    """Descending diffusion times shared by record/inject/invert runs.

    Times are round(i * T / num_steps) for i = num_steps..1, capped at T-1,
    so the first model call sits at (near) pure noise and the last update
    steps to the clean image.
    """

    T: int
    times: tuple = field(default_factory=tuple)

    @staticmethod
    def build(T: int, num_steps: int) -> "StepGrid":
        if not 1 <= num_steps <= T:
            raise ScheduleError(f"num_steps {num_steps} outside [1, {T}]")
        times = [min(T - 1, round(i * T / num_steps)) for i in range(num_steps, 0, -1)]
        if len(set(times)) != len(times):
            raise ScheduleError(f"degenerate step grid for T={T}, num_steps={num_steps}")
        return StepGrid(T=T, times=tuple(int(t) for t in times))

    def __len__(self) -> int:
        return len(self.times)


def add_noise(x0: torch.Tensor, eps: torch.Tensor, t: int, schedule: DiffusionSchedule) -> torch.Tensor:
    """Forward process q(x_t | x_0): sqrt(a_bar)*x0 + sqrt(1-a_bar)*eps."""
    a = schedule.alpha_bar(t)
    return float(np.sqrt(a)) * x0 + float(np.sqrt(1.0 - a)) * eps


def cfg_combine(uncond_pred: torch.Tensor, cond_pred: torch.Tensor, scale: float) -> torch.Tensor:
    """uncond + scale * (cond - uncond); scale 0/1 return the inputs exactly."""
    if scale == 0.0:
        return uncond_pred
    if scale == 1.0:
        return cond_pred
    return uncond_pred + scale * (cond_pred - uncond_pred)


def ddim_step(
    noise_pred: torch.Tensor,
    x_t: torch.Tensor,
    t: int,
    t_prev: int,
    schedule: DiffusionSchedule,
    eta: float = 0.0,
    rng: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """One DDIM update from time t down to t_prev (CLEAN_T steps to x0).

    t_prev == t is the identity; t_prev > t is rejected. With eta == 0 the
    update is deterministic and rng is unused.
    """
    if t_prev == t:
        return x_t
    if t_prev != CLEAN_T and t_prev > t:
        raise ScheduleError(f"ddim_step requires t >= t_prev, got t={t}, t_prev={t_prev}")
    a_t = schedule.alpha_bar(t)
    a_p = schedule.alpha_bar(t_prev)
    if eta > 0.0:
        sigma = eta * float(np.sqrt((1.0 - a_p) / (1.0 - a_t)) * np.sqrt(1.0 - a_t / a_p))
    else:
        sigma = 0.0
    dir_coef = np.sqrt(max(1.0 - a_p - sigma * sigma, 0.0))
    # x_prev = sqrt(a_p) * x0_pred + dir * eps, folded into two float64
    # scalars so the tiny sqrt(a_t) divisor never touches float32 tensors
    r = np.sqrt(a_p / a_t)
    s = dir_coef - r * np.sqrt(1.0 - a_t)
    x_prev = float(r) * x_t + float(s) * noise_pred
    if sigma > 0.0:
        if rng is None:
            raise ScheduleError("eta > 0 requires an explicit rng")
        noise = torch.randn(x_t.shape, generator=rng, dtype=x_t.dtype)
        x_prev = x_prev + sigma * noise
    return x_prev


class StepHook(Protocol):
    """Per-step hook used by sample() to drive tap controllers."""

    def tap_modes(self, step_index: int, t: int) -> Optional[dict]:
        ...

    def on_recorded(self, step_index: int, t: int, bundle: dict) -> None:
        ...


def _predict_noise(model, x, t, cond, cfg_scale, tap_modes):
    """CFG noise prediction; at scale 1 only the conditional branch runs.

    Branches are batched as rows [uncond, cond]; tap record/inject applies to
    the whole batch, with each row blending against its own live feature.
    Returns (eps, recorded bundle with batch rows intact, cond_row_index).
    """
    from . import unet as unet_mod

    if cfg_scale == 1.0:
        eps, recorded = unet_mod.forward(model, x, t, cond, tap_modes)
        return eps, recorded, 0
    x2 = torch.cat([x, x], dim=0)
    conds = [unet_mod.Conditioning(None), cond]
    eps2, recorded = unet_mod.forward(model, x2, t, conds, tap_modes)
    uncond_pred, cond_pred = eps2[:1], eps2[1:]
    return cfg_combine(uncond_pred, cond_pred, cfg_scale), recorded, 1


def sample(
    model,
    z_T: torch.Tensor,
    cond,
    sampler_config: SamplerConfig,
    schedule: DiffusionSchedule,
    injector: Optional[StepHook] = None,
    rng: Optional[torch.Generator] = None,
) -> tuple:
    """Run the full DDIM chain from z_T; returns (x0, trajectory).

    The optional injector sets tap modes before each model call and receives
    any recorded features afterwards. The trajectory includes z_T and every
    intermediate latent, ending in x0.
    """
    sampler_config.validate(schedule.T)
    grid = StepGrid.build(schedule.T, sampler_config.num_steps)
    x = z_T
    trajectory = [x]
    with torch.no_grad():
        for k, t in enumerate(grid.times):
            modes = injector.tap_modes(k, t) if injector is not None else None
            eps, recorded, cond_row = _predict_noise(
                model, x, t, cond, sampler_config.cfg_scale, modes
            )
            if injector is not None and recorded:
                injector.on_recorded(
                    k, t, {tap: feat[cond_row] for tap, feat in recorded.items()}
                )
            t_prev = grid.times[k + 1] if k + 1 < len(grid.times) else CLEAN_T
            x = ddim_step(eps, x, t, t_prev, schedule, sampler_config.eta, rng)
            trajectory.append(x)
    return x, trajectory


def ddim_invert(
    model,
    x0: torch.Tensor,
    cond,
    num_steps: int,
    schedule: DiffusionSchedule,
    cfg_scale: float = 1.0,
) -> list:
    """Deterministic DDIM inversion x0 -> z_T along the shared step grid.

    Returns the whole trajectory [x0, ..., z_T]. Walks the sampling grid in
    reverse, starting from alpha_bar = 1 (clean), so that sample() over the
    same grid retraces the visited noise levels exactly. Runs at guidance 1
    by default; guided inversion is unstable.
    """
    if not 1 <= num_steps <= schedule.T:
        raise ScheduleError(f"num_steps {num_steps} outside [1, {schedule.T}]")
    grid = StepGrid.build(schedule.T, num_steps)
    ascending = list(reversed(grid.times))
    x = x0
    trajectory = [x]
    a_cur = 1.0
    with torch.no_grad():
        for t in ascending:
            eps, _, _ = _predict_noise(model, x, t, cond, cfg_scale, None)
            a_next = schedule.alpha_bar(t)
            r = np.sqrt(a_next / a_cur)
            s = np.sqrt(1.0 - a_next) - r * np.sqrt(1.0 - a_cur)
            x = float(r) * x + float(s) * eps
            trajectory.append(x)
            a_cur = a_next
    return trajectory
