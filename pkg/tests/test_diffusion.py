import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from fadm.diffusion import (
    DiffusionState,
    ScheduleError,
    clipped_posterior_mean,
    compose_forward_check,
    ddim_step,
    denoise_step,
    forward_diffuse,
    make_schedule,
    posterior_mean,
    sample,
)


def brute_force_alpha_bar(beta_start, beta_end, T, t):
    betas = [beta_start + (beta_end - beta_start) * i / (T - 1) for i in range(T)] if T > 1 else [beta_start]
    return math.prod(1.0 - b for b in betas[:t])


class NoiseOracle:
    """Returns a fixed, known noise tensor regardless of input."""

    def __init__(self, z):
        self.z = z

    def __call__(self, x, t, cond):
        return self.z


class X0Oracle:
    """Returns the noise that is consistent with a known clean image x0."""

    def __init__(self, x0, schedule):
        self.x0, self.s = x0, schedule

    def __call__(self, x, t, cond):
        ab = float(self.s.alpha_bars[int(t[0])])
        return (x - ab**0.5 * self.x0) / (1 - ab) ** 0.5


# -- schedule -----------------------------------------------------------------

def test_single_step_schedule():
    s = make_schedule("linear", 1, 0.1, 0.1)
    assert s.betas[1:].tolist() == [0.1]
    assert s.alpha_bars[1:].tolist() == pytest.approx([0.9], abs=1e-15)


def test_two_step_schedule():
    s = make_schedule("linear", 2, 0.1, 0.2)
    assert s.betas[1:].tolist() == pytest.approx([0.1, 0.2], abs=1e-15)
    assert s.alpha_bars[1:].tolist() == pytest.approx([0.9, 0.72], abs=1e-15)


def test_hundred_steps_against_brute_force_product():
    s = make_schedule("linear", 100, 1e-4, 0.02)
    for t in range(1, 101):
        assert float(s.alpha_bars[t]) == pytest.approx(brute_force_alpha_bar(1e-4, 0.02, 100, t), rel=1e-12)


@given(
    T=st.integers(1, 300),
    lo=st.floats(1e-6, 0.2),
    span=st.floats(0.0, 0.5),
)
@settings(max_examples=60, deadline=None)
def test_schedule_invariants(T, lo, span):
    hi = min(lo + span, 0.99)
    s = make_schedule("linear", T, lo, hi)
    betas = s.betas[1:]
    assert torch.all((betas > 0) & (betas < 1))
    assert float(s.alpha_bars[0]) == 1.0
    assert float(s.alpha_bars[T]) > 0
    assert torch.all(s.alphas[1:] == 1 - betas)
    for t in range(1, T + 1):
        assert float(s.alpha_bars[t]) == float(s.alpha_bars[t - 1]) * float(s.alphas[t])
        assert s.alpha_bars[t] < s.alpha_bars[t - 1]


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
def test_schedule_rejects_bad_bounds(args):
    with pytest.raises(ScheduleError):
        make_schedule("linear", *args)


def test_unknown_schedule_kind():
    with pytest.raises(ScheduleError):
        make_schedule("cosine", 10, 1e-4, 0.02)


# -- forward process ----------------------------------------------------------

def test_forward_near_identity_at_tiny_noise():
    s = make_schedule("linear", 10, 1e-8, 0.02)
    x0 = torch.rand(3, 8, 8)
    xt = forward_diffuse(x0, 1, torch.randn(3, 8, 8), s)
    assert torch.allclose(xt, x0, atol=1e-3)


def test_forward_zero_noise_is_scaled_input():
    s = make_schedule()
    x0 = torch.rand(3, 8, 8, dtype=torch.float64)
    xt = forward_diffuse(x0, 37, torch.zeros_like(x0), s)
    assert torch.equal(xt, math.sqrt(float(s.alpha_bars[37])) * x0)


def test_forward_monte_carlo_moments():
    s = make_schedule()
    gen = torch.Generator().manual_seed(0)
    x0 = torch.rand(4, 4, dtype=torch.float64, generator=gen)
    n, t = 10_000, 40
    z = torch.randn(n, 4, 4, dtype=torch.float64, generator=gen)
    xt = forward_diffuse(x0.expand(n, 4, 4), t, z, s)
    ab = float(s.alpha_bars[t])
    var = 1 - ab
    mean_se = math.sqrt(var / n)
    var_se = math.sqrt(2 * var**2 / (n - 1))
    assert (xt.mean(0) - math.sqrt(ab) * x0).abs().max() < 3 * mean_se * 1.5
    assert (xt.var(0) - var).abs().max() < 3 * var_se * 1.5


def test_forward_per_sample_timesteps():
    s = make_schedule()
    x0 = torch.rand(2, 3, 4, 4)
    z = torch.randn(2, 3, 4, 4)
    both = forward_diffuse(x0, torch.tensor([5, 80]), z, s)
    assert torch.allclose(both[0], forward_diffuse(x0[0], 5, z[0], s))
    assert torch.allclose(both[1], forward_diffuse(x0[1], 80, z[1], s))


def test_forward_errors():
    s = make_schedule("linear", 10)
    with pytest.raises(ValueError):
        forward_diffuse(torch.zeros(3, 4, 4), 1, torch.zeros(3, 4, 5), s)
    with pytest.raises(ScheduleError):
        forward_diffuse(torch.zeros(3, 4, 4), 11, torch.zeros(3, 4, 4), s)
    with pytest.raises(ScheduleError):
        forward_diffuse(torch.zeros(3, 4, 4), 0, torch.zeros(3, 4, 4), s)


def test_compose_check_t1_identical():
    s = make_schedule()
    r = compose_forward_check(torch.rand(2, 3, 3), 1, s, seed=0, n_samples=500)
    assert r["mean_discrepancy"] < 1e-12
    assert r["var_discrepancy"] < 1e-12


def test_compose_check_t5_within_three_sigma():
    s = make_schedule()
    r = compose_forward_check(torch.rand(2, 3, 3), 5, s, seed=1)
    assert r["mean_discrepancy"] < 3 * r["mean_se"] * 1.5
    assert r["var_discrepancy"] < 3 * r["var_se"] * 1.5


def test_compose_check_zero_image():
    s = make_schedule()
    r = compose_forward_check(torch.zeros(2, 2), 7, s, seed=2)
    sd = math.sqrt(r["expected_var"] / 10_000)
    assert r["composed_mean"].abs().max() < 4 * sd
    assert r["closed_mean"].abs().max() < 4 * sd
    assert torch.all(r["expected_mean"] == 0)
    assert r["expected_var"] == pytest.approx(1 - float(s.alpha_bars[7]))


# -- reverse process ----------------------------------------------------------

def test_oracle_noise_recovers_x0_at_t1():
    s = make_schedule()
    gen = torch.Generator().manual_seed(3)
    x0 = torch.rand(2, 3, 8, 8, generator=gen)
    z = torch.randn(2, 3, 8, 8, generator=gen)
    x1 = forward_diffuse(x0, 1, z, s)
    out = denoise_step(DiffusionState(x1, 1), None, NoiseOracle(z), s, gen)
    assert out.t == 0
    assert (out.x - x0).abs().max() < 1e-5


def test_final_step_adds_no_noise():
    s = make_schedule()
    x = torch.randn(1, 3, 4, 4)
    model = NoiseOracle(torch.zeros(1, 3, 4, 4))
    a = denoise_step(DiffusionState(x, 1), None, model, s, torch.Generator().manual_seed(0))
    b = denoise_step(DiffusionState(x, 1), None, model, s, torch.Generator().manual_seed(99))
    assert torch.equal(a.x, b.x)
    assert torch.allclose(a.x, x / math.sqrt(float(s.alphas[1])))


def test_denoise_step_deterministic_given_seed():
    s = make_schedule()
    x = torch.randn(1, 3, 4, 4)
    model = NoiseOracle(torch.randn(1, 3, 4, 4))
    a = denoise_step(DiffusionState(x, 50), None, model, s, torch.Generator().manual_seed(5))
    b = denoise_step(DiffusionState(x, 50), None, model, s, torch.Generator().manual_seed(5))
    assert torch.equal(a.x, b.x)


def test_denoise_step_shape_mismatch():
    s = make_schedule()
    with pytest.raises(ValueError):
        denoise_step(DiffusionState(torch.zeros(1, 3, 4, 4), 3), None, NoiseOracle(torch.zeros(1, 3, 4, 5)), s)


def test_sample_contract_with_random_model():
    s = make_schedule("linear", 20)
    torch.manual_seed(0)
    net = torch.nn.Conv2d(3, 3, 3, padding=1)
    model = lambda x, t, c: net(x)  # noqa: E731
    out = sample(None, model, s, seed=4, shape=(2, 3, 8, 8))
    assert out.shape == (2, 3, 8, 8)
    assert out.min() >= 0 and out.max() <= 1
    again = sample(None, model, s, seed=4, shape=(2, 3, 8, 8))
    assert torch.equal(out, again)


def test_sample_with_consistent_oracle_returns_x0():
    s = make_schedule()
    x0 = torch.rand(2, 3, 8, 8)
    out = sample(None, X0Oracle(x0, s), s, seed=0, shape=x0.shape)
    assert (out - x0).abs().max() < 1e-4


def test_ddim_with_consistent_oracle_returns_x0():
    s = make_schedule()
    x0 = torch.rand(1, 3, 8, 8)
    out = sample(None, X0Oracle(x0, s), s, seed=0, shape=x0.shape, sampler="ddim", ddim_steps=10)
    assert (out - x0).abs().max() < 1e-4


def test_ddim_step_is_deterministic():
    s = make_schedule()
    x = torch.randn(1, 3, 4, 4)
    m = NoiseOracle(torch.randn(1, 3, 4, 4))
    assert torch.equal(ddim_step(DiffusionState(x, 40), 20, None, m, s).x,
                       ddim_step(DiffusionState(x, 40), 20, None, m, s).x)


def test_per_item_seeds_do_not_depend_on_batch_mates():
    s = make_schedule("linear", 10)
    model = lambda x, t, c: 0.1 * x  # noqa: E731
    pair = sample(None, model, s, seed=[11, 12], shape=(2, 3, 4, 4))
    single = sample(None, model, s, seed=[12], shape=(1, 3, 4, 4))
    assert torch.allclose(pair[1], single[0], atol=1e-6)


def test_callable_condition_is_resolved_every_step():
    s = make_schedule("linear", 7)
    seen = []

    def cond(t):
        seen.append(t)
        return None

    sample(cond, lambda x, t, c: torch.zeros_like(x), s, seed=0, shape=(1, 3, 2, 2))
    assert seen == list(range(7, 0, -1))


# -- clipped posterior ---------------------------------------------------------

def test_clipped_mean_matches_plain_mean_inside_range():
    s = make_schedule()
    gen = torch.Generator().manual_seed(6)
    x0 = torch.rand(2, 3, 4, 4, generator=gen, dtype=torch.float64) * 0.8 + 0.1
    z = torch.randn(2, 3, 4, 4, generator=gen, dtype=torch.float64)
    for t in (1, 2, 17, 60, 100):
        x_t = forward_diffuse(x0, t, z, s)
        assert torch.allclose(clipped_posterior_mean(x_t, t, z, s), posterior_mean(x_t, t, z, s), atol=1e-9)


def test_clip_bounds_the_final_step():
    s = make_schedule()
    x0 = torch.tensor([[-0.5, 0.3, 1.7]], dtype=torch.float64)
    z = torch.randn(1, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    x1 = forward_diffuse(x0, 1, z, s)
    out = denoise_step(DiffusionState(x1, 1), None, NoiseOracle(z), s, clip_denoised=True)
    assert torch.allclose(out.x, x0.clamp(0, 1), atol=1e-12)


def test_clipped_samplers_recover_in_range_x0():
    s = make_schedule()
    x0 = torch.rand(1, 3, 8, 8)
    for kw in (dict(), dict(sampler="ddim", ddim_steps=10)):
        out = sample(None, X0Oracle(x0, s), s, seed=0, shape=x0.shape, clip_denoised=True, **kw)
        assert (out - x0).abs().max() < 1e-4
