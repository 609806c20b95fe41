"""Conditional DDPM machinery: noise schedule, forward noising, ancestral sampling.

Forward process (closed form for any timestep t):
    x_t = sqrt(abar_t) * x_0 + sqrt(1 - abar_t) * z,   z ~ N(0, I)

Reverse step with fixed variance sigma_t^2 = beta_t:
    x_{t-1} = 1/sqrt(alpha_t) * (x_t - beta_t / sqrt(1 - abar_t) * z_hat) + sigma_t * n

With ``clip_denoised`` the same posterior mean is computed from the implied
clean image x0_hat = (x_t - sqrt(1 - abar_t) * z_hat) / sqrt(abar_t), clamped
to [0, 1] first (the reference DDPM sampler does this); without clamping the
two forms are identical.

Timesteps are 1-based throughout: t = 1 is the last denoising step and
``alpha_bars[0]`` holds the convention abar_0 = 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch


class ScheduleError(ValueError):
    """Raised for invalid schedule bounds or timesteps outside [1, T]."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule with derived products, indexed by timestep.

    ``betas[t]`` and ``alphas[t]`` are defined for t in 1..T (index 0 is a
    placeholder equal to 0 / 1); ``alpha_bars[t]`` for t in 0..T.
    """

    T: int
    betas: torch.Tensor
    alphas: torch.Tensor
    alpha_bars: torch.Tensor

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise ScheduleError(f"timestep {t} outside [1, {self.T}]")
        return t


def make_schedule(
    kind: str = "linear", T: int = 100, beta_start: float = 1e-3, beta_end: float = 0.2
) -> NoiseSchedule:
    if kind != "linear":
        raise ScheduleError(f"unknown schedule kind {kind!r}")
    if int(T) != T or T < 1:
        raise ScheduleError(f"T must be a positive integer, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ScheduleError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    T = int(T)
    if T == 1:
        inner = torch.tensor([beta_start], dtype=torch.float64)
    else:
        inner = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    betas = torch.cat([torch.zeros(1, dtype=torch.float64), inner])
    alphas = 1.0 - betas
    # sequential product keeps alpha_bars[t] == alpha_bars[t-1] * alphas[t] bit-exact
    bars = [1.0]
    for a in alphas[1:].tolist():
        bars.append(bars[-1] * a)
    alpha_bars = torch.tensor(bars, dtype=torch.float64)
    return NoiseSchedule(T=T, betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def _coef(values: torch.Tensor, t, like: torch.Tensor) -> torch.Tensor:
    """Gather per-sample coefficients for scalar or (B,) timesteps, broadcastable to ``like``."""
    if isinstance(t, torch.Tensor) and t.dim() > 0:
        out = values[t.long().cpu()].to(like.dtype).to(like.device)
        return out.view(-1, *([1] * (like.dim() - 1)))
    return torch.tensor(float(values[int(t)]), dtype=like.dtype, device=like.device)


def _validate_ts(t, schedule: NoiseSchedule):
    if isinstance(t, torch.Tensor) and t.dim() > 0:
        if t.numel() and (int(t.min()) < 1 or int(t.max()) > schedule.T):
            raise ScheduleError(f"timesteps outside [1, {schedule.T}]")
        return t
    return schedule.check_t(t)


def forward_diffuse(
    x0: torch.Tensor, t, noise: torch.Tensor, schedule: NoiseSchedule
) -> torch.Tensor:
    """Noise ``x0`` to timestep ``t`` in one shot. ``t`` may be an int or a (B,) tensor."""
    if noise.shape != x0.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} != x0 shape {tuple(x0.shape)}")
    t = _validate_ts(t, schedule)
    ab = _coef(schedule.alpha_bars, t, x0)
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * noise


def forward_step(
    x_prev: torch.Tensor, t: int, noise: torch.Tensor, schedule: NoiseSchedule
) -> torch.Tensor:
    """Single transition q(x_t | x_{t-1})."""
    t = schedule.check_t(t)
    beta = float(schedule.betas[t])
    return (1.0 - beta) ** 0.5 * x_prev + beta**0.5 * noise


def compose_forward_check(
    x0: torch.Tensor, t: int, schedule: NoiseSchedule, seed: int, n_samples: int = 10_000
) -> dict:
    """Compare t composed single-step noisings against one closed-form noising.

    Returns per-pixel discrepancies of the empirical means and variances along
    with their Monte-Carlo standard errors, so callers can apply a k-sigma bound.
    """
    t = schedule.check_t(t)
    gen = torch.Generator().manual_seed(int(seed))
    x0 = x0.to(torch.float64)
    reps = x0.unsqueeze(0).expand(n_samples, *x0.shape)

    # both paths share the first noise draw, so t=1 agrees exactly
    first = torch.randn(reps.shape, generator=gen, dtype=torch.float64)
    composed = forward_step(reps, 1, first, schedule)
    for s in range(2, t + 1):
        composed = forward_step(composed, s, torch.randn(reps.shape, generator=gen, dtype=torch.float64), schedule)
    closed = forward_diffuse(reps, t, first, schedule)

    var = 1.0 - float(schedule.alpha_bars[t])
    mean_c, mean_f = composed.mean(0), closed.mean(0)
    var_c, var_f = composed.var(0), closed.var(0)
    # conservative: standard error of a difference of two independent estimates
    mean_se = (2.0 * var / n_samples) ** 0.5
    var_se = (2.0 * 2.0 * var**2 / (n_samples - 1)) ** 0.5
    return {
        "mean_discrepancy": float((mean_c - mean_f).abs().max()),
        "var_discrepancy": float((var_c - var_f).abs().max()),
        "mean_se": mean_se,
        "var_se": var_se,
        "expected_mean": (float(schedule.alpha_bars[t]) ** 0.5) * x0,
        "expected_var": var,
        "composed_mean": mean_c,
        "composed_var": var_c,
        "closed_mean": mean_f,
        "closed_var": var_f,
    }


@dataclass
class DiffusionState:
    x: torch.Tensor
    t: int


# ``model(x_t, t, cond) -> predicted noise``; cond may be a ConditionBundle or any
# object the model understands. A callable ``cond(t)`` is resolved per step.
NoiseModel = Callable[[torch.Tensor, torch.Tensor, object], torch.Tensor]


def _resolve_cond(cond, t: int):
    return cond(t) if callable(cond) else cond


def _predict(model: NoiseModel, x: torch.Tensor, t: int, cond) -> torch.Tensor:
    ts = torch.full((x.shape[0],), t, dtype=torch.long, device=x.device)
    z_hat = model(x, ts, _resolve_cond(cond, t))
    if z_hat.shape != x.shape:
        raise ValueError(f"model output shape {tuple(z_hat.shape)} != state shape {tuple(x.shape)}")
    return z_hat


def posterior_mean(x_t: torch.Tensor, t: int, z_hat: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    beta = float(schedule.betas[t])
    alpha = float(schedule.alphas[t])
    abar = float(schedule.alpha_bars[t])
    return (x_t - beta / (1.0 - abar) ** 0.5 * z_hat) / alpha**0.5


def predicted_x0(x_t: torch.Tensor, t: int, z_hat: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    abar = float(schedule.alpha_bars[t])
    return (x_t - (1.0 - abar) ** 0.5 * z_hat) / abar**0.5


def clipped_posterior_mean(x_t: torch.Tensor, t: int, z_hat: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    x0 = predicted_x0(x_t, t, z_hat, schedule).clamp(0.0, 1.0)
    beta = float(schedule.betas[t])
    abar, abar_prev = float(schedule.alpha_bars[t]), float(schedule.alpha_bars[t - 1])
    c0 = abar_prev**0.5 * beta / (1.0 - abar)
    ct = float(schedule.alphas[t]) ** 0.5 * (1.0 - abar_prev) / (1.0 - abar)
    return c0 * x0 + ct * x_t


def gaussian(shape, rng, dtype=torch.float32) -> torch.Tensor:
    """N(0, I) draw from one generator, or one generator per leading-axis item."""
    if isinstance(rng, (list, tuple)):
        if len(rng) != shape[0]:
            raise ValueError(f"{len(rng)} generators for batch of {shape[0]}")
        return torch.stack([torch.randn(shape[1:], generator=g, dtype=dtype) for g in rng])
    return torch.randn(shape, generator=rng, dtype=dtype)


def denoise_step(
    state: DiffusionState,
    cond,
    model: NoiseModel,
    schedule: NoiseSchedule,
    rng=None,
    clip_denoised: bool = False,
) -> DiffusionState:
    """One ancestral step x_t -> x_{t-1}; the t = 1 step adds no noise."""
    t = schedule.check_t(state.t)
    with torch.no_grad():
        z_hat = _predict(model, state.x, t, cond)
        mean = (clipped_posterior_mean if clip_denoised else posterior_mean)(state.x, t, z_hat, schedule)
        if t > 1:
            noise = gaussian(state.x.shape, rng, state.x.dtype).to(state.x.device)
            mean = mean + float(schedule.betas[t]) ** 0.5 * noise
    return DiffusionState(x=mean, t=t - 1)


def ddim_step(
    state: DiffusionState, t_prev: int, cond, model: NoiseModel, schedule: NoiseSchedule,
    clip_denoised: bool = False,
) -> DiffusionState:
    """Deterministic (eta = 0) jump from ``state.t`` to ``t_prev``."""
    t = schedule.check_t(state.t)
    with torch.no_grad():
        z_hat = _predict(model, state.x, t, cond)
        ab, ab_prev = float(schedule.alpha_bars[t]), float(schedule.alpha_bars[t_prev])
        x0_hat = predicted_x0(state.x, t, z_hat, schedule)
        if clip_denoised:
            x0_hat = x0_hat.clamp(0.0, 1.0)
            z_hat = (state.x - ab**0.5 * x0_hat) / (1.0 - ab) ** 0.5
        x = ab_prev**0.5 * x0_hat + (1.0 - ab_prev) ** 0.5 * z_hat
    return DiffusionState(x=x, t=t_prev)


def sample(
    cond,
    model: NoiseModel,
    schedule: NoiseSchedule,
    seed,
    shape: tuple,
    *,
    sampler: str = "ancestral",
    ddim_steps: int = 20,
    clamp: bool = True,
    clip_denoised: bool = False,
) -> torch.Tensor:
    """Run the full reverse chain from x_T ~ N(0, I) and return the clamped result.

    ``cond`` is either fixed or a callable ``cond(t)`` evaluated at every step.
    ``seed`` is an int, or a sequence of ints giving each batch item its own
    noise stream (so an item's result does not depend on its batch-mates).
    """
    if isinstance(seed, (list, tuple)):
        gen = [torch.Generator().manual_seed(int(s)) for s in seed]
    else:
        gen = torch.Generator().manual_seed(int(seed))
    state = DiffusionState(x=gaussian(shape, gen), t=schedule.T)
    if sampler == "ancestral":
        while state.t > 0:
            state = denoise_step(state, cond, model, schedule, gen, clip_denoised)
    elif sampler == "ddim":
        steps = max(1, min(int(ddim_steps), schedule.T))
        ts = torch.linspace(schedule.T, 1, steps).round().long().tolist()
        ts = sorted(set(ts), reverse=True) + [0]
        for t_prev in ts[1:]:
            state = ddim_step(state, t_prev, cond, model, schedule, clip_denoised)
    else:
        raise ValueError(f"unknown sampler {sampler!r}")
    return state.x.clamp(0.0, 1.0) if clamp else state.x
