import numpy as np
import pytest

from config import SamplerConfig
from denoisers import (
    ExternalPredictionDenoiser,
    GaussianPosteriorOracle,
    SingleTargetOracle,
    ZeroDenoiser,
    build_denoiser,
)
from diffusion import cached_schedule, forward_noise, sample
from errors import DiffusionError
from models import Geometry, IntensitySpace, Volume
from nifti_io import save_volume


def test_single_target_oracle_noise_is_the_injected_noise(schedule, rng):
    target = rng.uniform(-1, 1, (5, 5))
    eps = rng.standard_normal((5, 5))
    x_i = forward_noise(target, 300, eps, schedule)

    oracle = SingleTargetOracle(target, "noise", schedule)

    np.testing.assert_allclose(oracle(x_i, None, 300), eps, atol=1e-10)
    np.testing.assert_array_equal(SingleTargetOracle(target, "image", schedule)(x_i, None, 300), target)


def test_single_target_oracle_checks_the_shape(schedule):
    oracle = SingleTargetOracle(np.zeros((4, 4)), "noise", schedule)
    with pytest.raises(DiffusionError) as excinfo:
        oracle(np.zeros((3, 3)), None, 10)
    assert excinfo.value.kind == "shape-mismatch"


def test_gaussian_posterior_mean_matches_monte_carlo(schedule):
    rng = np.random.default_rng(2)
    mu, s, i = 0.1, 0.4, 600
    x0 = rng.normal(mu, s, 400000)
    x_i = forward_noise(x0, i, rng.standard_normal(x0.size), schedule)
    oracle = GaussianPosteriorOracle(mu, s, "image", schedule)

    # regress x0 on x_i: the posterior mean is linear in x_i
    slope, intercept = np.polyfit(x_i, x0, 1)
    predicted = oracle(np.array([0.0, 1.0]), None, i)

    assert predicted[0] == pytest.approx(intercept, abs=5e-3)
    assert predicted[1] - predicted[0] == pytest.approx(slope, abs=5e-3)


def test_gaussian_posterior_with_zero_spread_is_the_mean(schedule):
    oracle = GaussianPosteriorOracle(0.3, 0.0, "image", schedule)

    np.testing.assert_allclose(oracle(np.array([-2.0, 0.0, 5.0]), None, 40), 0.3)


def test_zero_denoiser_in_noise_mode_returns_the_scaled_input():
    cfg = SamplerConfig(mode="noise", steps=1, clamp_x0=False)
    x = sample(ZeroDenoiser("noise"), None, (3,), cfg, rng=np.random.default_rng(0))
    start = np.random.default_rng(0).standard_normal(3)

    np.testing.assert_allclose(x, start / np.sqrt(cached_schedule().alpha_bar[1000]))


def test_unknown_mode_is_rejected():
    with pytest.raises(DiffusionError) as excinfo:
        ZeroDenoiser("velocity")
    assert excinfo.value.kind == "mode-mismatch"


def test_build_denoiser_by_name(schedule):
    oracle = build_denoiser("gaussian-posterior", mu=0.0, s=0.5, sched=schedule)

    assert isinstance(oracle, GaussianPosteriorOracle)
    with pytest.raises(DiffusionError) as excinfo:
        build_denoiser("unet")
    assert excinfo.value.kind == "unknown-denoiser"


def _write_prediction(directory, name, data):
    geometry = Geometry(data.shape, (1.0, 1.0, 1.0), (0.0, 0.0, 0.0))
    save_volume(Volume.on_grid(data, geometry, IntensitySpace.MR_RAW), directory / name)


def test_external_predictions_are_read_per_tile_and_step(tmp_path):
    _write_prediction(tmp_path, "tile0003_t0020.nii.gz", np.full((2, 3, 4), 0.5))
    denoiser = ExternalPredictionDenoiser(tmp_path, "image", 3)

    out = denoiser(np.zeros((2, 3, 4)), None, 20)

    np.testing.assert_allclose(out, 0.5)
    assert not denoiser.supports_unconditional


def test_external_predictions_reshape_2d_tiles(tmp_path):
    _write_prediction(tmp_path, "tile0000_t0005.nii.gz", np.arange(6, dtype=np.float64).reshape(2, 3, 1))

    out = ExternalPredictionDenoiser(tmp_path, "noise", 0)(np.zeros((2, 3)), None, 5)

    np.testing.assert_allclose(out, np.arange(6).reshape(2, 3))


def test_external_unconditioned_predictions_are_used_for_black_conditions(tmp_path):
    _write_prediction(tmp_path, "tile0001_t0007.nii.gz", np.full((2, 2, 2), 0.25))
    _write_prediction(tmp_path, "uncond_tile0001_t0007.nii.gz", np.full((2, 2, 2), -0.75))
    denoiser = ExternalPredictionDenoiser(tmp_path, "image", 0).for_tile(1)

    conditioned = denoiser(np.zeros((2, 2, 2)), np.zeros((2, 2, 2)), 7)
    unconditioned = denoiser(np.zeros((2, 2, 2)), np.full((2, 2, 2), -1.0), 7)

    assert denoiser.supports_unconditional
    np.testing.assert_allclose(conditioned, 0.25)
    np.testing.assert_allclose(unconditioned, -0.75)


def test_external_missing_prediction_is_an_error(tmp_path):
    with pytest.raises(DiffusionError) as excinfo:
        ExternalPredictionDenoiser(tmp_path, "image", 0)(np.zeros((2, 2)), None, 9)
    assert excinfo.value.kind == "missing-prediction"
    with pytest.raises(DiffusionError):
        ExternalPredictionDenoiser(tmp_path / "absent", "image", 0)
