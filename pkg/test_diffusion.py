import math

import numpy as np
import pytest
from pydantic import ValidationError
from scipy import stats

from config import SamplerConfig
from denoisers import GaussianPosteriorOracle, SingleTargetOracle, ZeroDenoiser
from diffusion import (
    Denoiser,
    build_cosine_schedule,
    ddim_coefficients,
    ddim_step,
    ddpm_step,
    forward_noise,
    guided_predict,
    noise_from_x0,
    sample,
    split_prediction,
    timestep_sequence,
    x0_from_noise,
)
from errors import DiffusionError


def _scalar_cosine_alpha_bar(T, s=0.008):
    def f(u):
        return math.cos(((u / T + s) / (1.0 + s)) * math.pi / 2.0) ** 2

    return [f(i) / f(0) for i in range(T + 1)]


@pytest.mark.parametrize("T", [100, 1000])
def test_cosine_schedule_properties(T):
    sched = build_cosine_schedule(T)

    assert sched.alpha_bar[0] == 1.0
    assert np.all(np.diff(sched.alpha_bar) < 0)
    assert sched.alpha_bar[T] < 0.01
    assert np.all(sched.beta[1:] > 0) and np.all(sched.beta[1:] <= 0.999)
    np.testing.assert_allclose(sched.alpha_bar, np.cumprod(sched.alpha), atol=1e-12)


@pytest.mark.parametrize("T", [100, 1000])
def test_cosine_schedule_follows_the_closed_form(T):
    sched = build_cosine_schedule(T)
    expected = _scalar_cosine_alpha_bar(T)

    # only the last beta reaches the 0.999 clip
    assert np.flatnonzero(sched.beta == 0.999).tolist() == [T]
    np.testing.assert_allclose(sched.alpha_bar[:T], expected[:T], atol=1e-12, rtol=0)
    expected_beta = [1.0 - expected[i] / expected[i - 1] for i in range(1, T)]
    np.testing.assert_allclose(sched.beta[1:T], expected_beta, atol=1e-12, rtol=0)
    assert sched.alpha_bar[T] == pytest.approx(expected[T - 1] * 0.001, rel=1e-12)


def test_schedule_tables_are_read_only(schedule):
    with pytest.raises(ValueError):
        schedule.alpha_bar[3] = 0.5


def test_schedule_rejects_bad_parameters():
    with pytest.raises(DiffusionError):
        build_cosine_schedule(0)
    with pytest.raises(DiffusionError):
        build_cosine_schedule(100, 0.0)


def test_forward_formula_inverts_both_ways(schedule, rng):
    x0 = rng.uniform(-1, 1, (8, 8))
    eps = rng.standard_normal((8, 8))
    x_i = forward_noise(x0, 400, eps, schedule)

    np.testing.assert_allclose(x0_from_noise(x_i, eps, 400, schedule), x0, atol=1e-12)
    np.testing.assert_allclose(noise_from_x0(x_i, x0, 400, schedule), eps, atol=1e-12)


def test_forward_noise_at_index_zero_is_rejected(schedule):
    with pytest.raises(DiffusionError) as excinfo:
        forward_noise(np.zeros(3), 0, np.zeros(3), schedule)
    assert excinfo.value.kind == "timestep-out-of-range"


def test_timestep_sequence_is_uniform_and_descending():
    visited = timestep_sequence(1000, 20)

    assert visited[0] == 1000 and visited[-1] == 1
    assert len(visited) == 20
    assert np.all(np.diff(visited) < 0)
    assert list(timestep_sequence(1000, 1)) == [1000]
    assert len(timestep_sequence(10, 10)) == 10
    with pytest.raises(DiffusionError):
        timestep_sequence(10, 11)


def test_ddim_step_to_zero_returns_the_clean_estimate(schedule, rng):
    x0_hat = rng.uniform(-1, 1, 5)

    out = ddim_step(rng.standard_normal(5), x0_hat, rng.standard_normal(5), 50, 0, 1.0, schedule, rng)

    np.testing.assert_array_equal(out, x0_hat)


def test_ddim_with_eta_zero_draws_no_noise(schedule):
    c1, c2 = ddim_coefficients(500, 300, 0.0, schedule)

    assert c1 == 0.0
    assert c2 == pytest.approx(math.sqrt(1.0 - schedule.alpha_bar[300]))


def test_ddpm_last_step_is_the_posterior_mean(schedule, rng):
    x1 = rng.standard_normal(4)
    x0_hat = rng.uniform(-1, 1, 4)

    first = ddpm_step(x1, x0_hat, 1, schedule, np.random.default_rng(0))
    second = ddpm_step(x1, x0_hat, 1, schedule, np.random.default_rng(1))

    np.testing.assert_array_equal(first, second)


def test_single_target_oracle_is_recovered_exactly():
    target = np.random.default_rng(0).uniform(-1, 1, (64, 64))
    oracle = SingleTargetOracle(target, mode="noise")
    cfg = SamplerConfig(mode="noise", eta=0.0, steps=20)

    out = sample(oracle, None, target.shape, cfg, rng=np.random.default_rng(1))

    assert np.abs(out.astype(np.float32) - target.astype(np.float32)).max() < 1e-5


def test_full_step_ddim_matches_ddpm_in_distribution():
    oracle = GaussianPosteriorOracle(mu=0.2, s=0.3, mode="image")
    ddpm = SamplerConfig(sampler="ddpm", steps=1000, clamp_x0=False)
    ddim = SamplerConfig(sampler="ddim", steps=1000, eta=1.0, clamp_x0=False)

    a = sample(oracle, None, (10000,), ddpm, rng=np.random.default_rng(21))
    b = sample(oracle, None, (10000,), ddim, rng=np.random.default_rng(22))

    assert stats.ks_2samp(a, b).pvalue > 0.01


def test_more_steps_never_worsen_the_single_target_error():
    target = np.random.default_rng(4).uniform(-1, 1, (32, 32))
    oracle = SingleTargetOracle(target, mode="noise")
    errors = []
    for steps in (1, 5, 10, 20, 50):
        cfg = SamplerConfig(mode="noise", eta=0.0, steps=steps, clamp_x0=False)
        out = sample(oracle, None, target.shape, cfg, rng=np.random.default_rng(9))
        errors.append(np.abs(out - target).max())

    assert max(errors) < 1e-5
    # rounding noise only: allow ties within 1e-10
    assert all(later <= earlier + 1e-10 for earlier, later in zip(errors, errors[1:]))


def test_noise_and_image_parameterizations_give_the_same_trajectory():
    rng = np.random.default_rng(5)
    for case in range(100):
        mu, s = rng.uniform(-0.5, 0.5), rng.uniform(0.05, 0.6)
        steps = int(rng.integers(2, 50))
        eta = float(rng.choice([0.0, 0.5, 1.0]))
        seed = int(rng.integers(1 << 30))
        outputs = []
        for mode in ("noise", "image"):
            cfg = SamplerConfig(mode=mode, steps=steps, eta=eta, T=200)
            oracle = GaussianPosteriorOracle(mu, s, mode, build_cosine_schedule(200))
            outputs.append(sample(oracle, None, (6,), cfg, rng=np.random.default_rng(seed)))
        np.testing.assert_allclose(outputs[0], outputs[1], atol=1e-6, err_msg=f"case {case}")


def test_clamped_noise_prediction_is_rederived(schedule, rng):
    x_i = rng.standard_normal(10) * 3.0
    eps_hat = rng.standard_normal(10)

    x0_hat, eps = split_prediction(eps_hat, x_i, 10, "noise", schedule, clamp=True)

    assert x0_hat.min() >= -1.0 and x0_hat.max() <= 1.0
    np.testing.assert_allclose(forward_noise(x0_hat, 10, eps, schedule), x_i, atol=1e-9)


class _RecordingDenoiser:
    mode = "image"

    def __init__(self, supports_unconditional=True):
        self.supports_unconditional = supports_unconditional
        self.conditions = []

    def __call__(self, x_i, condition, i):
        self.conditions.append(None if condition is None else np.asarray(condition).copy())
        return np.full(np.shape(x_i), float(np.mean(condition)))


def test_guidance_extrapolates_away_from_the_black_condition():
    denoiser = _RecordingDenoiser()
    condition = np.full((2, 2), 0.5)

    out = guided_predict(denoiser, np.zeros((2, 2)), condition, 10, 2.0)

    # (w + 1) * 0.5 - w * (-1)
    np.testing.assert_allclose(out, 3.0 * 0.5 + 2.0)
    assert np.all(denoiser.conditions[1] == -1.0)
    assert isinstance(denoiser, Denoiser)


def test_guidance_zero_makes_a_single_call():
    denoiser = _RecordingDenoiser()

    guided_predict(denoiser, np.zeros(3), np.zeros(3), 10, 0.0)

    assert len(denoiser.conditions) == 1


def test_guidance_needs_unconditional_support():
    with pytest.raises(DiffusionError) as excinfo:
        guided_predict(_RecordingDenoiser(False), np.zeros(3), np.zeros(3), 10, 1.0)
    assert excinfo.value.kind == "unconditional-unsupported"
    with pytest.raises(DiffusionError) as excinfo:
        guided_predict(_RecordingDenoiser(), np.zeros(3), np.zeros(3), 10, -1.0)
    assert excinfo.value.kind == "invalid-guidance"


def test_sampler_mode_must_match_the_denoiser():
    with pytest.raises(DiffusionError) as excinfo:
        sample(ZeroDenoiser("noise"), None, (3,), SamplerConfig(mode="image"))
    assert excinfo.value.kind == "mode-mismatch"


def test_ddpm_requires_every_step():
    with pytest.raises(ValidationError):
        SamplerConfig(sampler="ddpm", steps=20)
    with pytest.raises(ValidationError):
        SamplerConfig(steps=2000)


def test_sampling_is_seeded():
    oracle = GaussianPosteriorOracle(0.0, 0.5, "image")
    cfg = SamplerConfig(steps=10)

    first = sample(oracle, None, (16,), cfg, rng=np.random.default_rng(3))
    second = sample(oracle, None, (16,), cfg, rng=np.random.default_rng(3))

    np.testing.assert_array_equal(first, second)
