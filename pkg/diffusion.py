import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Protocol, Sequence, Tuple, runtime_checkable

import numpy as np

from config import SamplerConfig
from constants import AIR_NORMALIZED, BETA_MAX, COSINE_S, DIFFUSION_T
from errors import DiffusionError

logger = logging.getLogger(__name__)


@runtime_checkable
class Denoiser(Protocol):
    """
    Anything that maps (x_i, condition, i) to a prediction of the same shape.
    `mode` says whether the prediction is the noise ("noise") or the clean
    image ("image"); `supports_unconditional` says whether it accepts the
    black condition used by guidance.
    """

    mode: str
    supports_unconditional: bool

    def __call__(self, x_i: np.ndarray, condition: Optional[np.ndarray], i: int) -> np.ndarray:
        ...


# Timesteps run 1..T; index 0 is the clean image and alpha_bar[0] = 1.
@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    T: int
    s: float
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def check_index(self, i: int, low: int = 1) -> int:
        if not low <= int(i) <= self.T:
            raise DiffusionError(f"Timestep {i} outside [{low}, {self.T}]", "timestep-out-of-range")
        return int(i)


def _cosine_f(u: np.ndarray, T: int, s: float) -> np.ndarray:
    return np.cos(((u / T + s) / (1.0 + s)) * np.pi / 2.0) ** 2


def build_cosine_schedule(T: int = DIFFUSION_T, s: float = COSINE_S) -> DiffusionSchedule:
    """
    alpha_bar[i] = f(i) / f(0) with f(u) = cos²(((u/T + s) / (1 + s)) · π/2).
    Betas are clipped at 0.999; from a clipped step on alpha_bar is carried on
    as the running product so alpha_bar[i] = ∏ alpha[j] holds everywhere.
    """
    if int(T) != T or T < 1:
        raise DiffusionError(f"T must be a positive integer, got {T}", "invalid-schedule")
    if not s > 0:
        raise DiffusionError(f"Cosine offset s must be positive, got {s}", "invalid-schedule")
    T = int(T)
    f = _cosine_f(np.arange(T + 1, dtype=np.float64), T, s)
    alpha_bar = f / f[0]
    beta = np.zeros(T + 1)
    for i in range(1, T + 1):
        beta[i] = 1.0 - alpha_bar[i] / alpha_bar[i - 1]
        if beta[i] > BETA_MAX:
            beta[i] = BETA_MAX
            alpha_bar[i] = alpha_bar[i - 1] * (1.0 - BETA_MAX)
    alpha = 1.0 - beta
    alpha_bar[0] = 1.0
    for table in (beta, alpha, alpha_bar):
        table.setflags(write=False)
    return DiffusionSchedule(T, float(s), beta, alpha, alpha_bar)


@lru_cache(maxsize=8)
def cached_schedule(T: int = DIFFUSION_T, s: float = COSINE_S) -> DiffusionSchedule:
    return build_cosine_schedule(T, s)


def _same_shape(a: np.ndarray, b: np.ndarray, what: str):
    if np.shape(a) != np.shape(b):
        raise DiffusionError(f"{what}: shape {np.shape(a)} != {np.shape(b)}", "shape-mismatch")


def forward_noise(x0: np.ndarray, i: int, eps: np.ndarray, sched: DiffusionSchedule) -> np.ndarray:
    """x_i = √ᾱ_i · x0 + √(1 − ᾱ_i) · eps"""
    _same_shape(x0, eps, "forward_noise")
    ab = sched.alpha_bar[sched.check_index(i)]
    return np.sqrt(ab) * np.asarray(x0, dtype=np.float64) + np.sqrt(1.0 - ab) * np.asarray(eps, dtype=np.float64)


def x0_from_noise(
    x_i: np.ndarray, eps_hat: np.ndarray, i: int, sched: DiffusionSchedule, clamp: bool = False
) -> np.ndarray:
    ab = sched.alpha_bar[sched.check_index(i)]
    if ab <= 0:
        raise DiffusionError(f"alpha_bar[{i}] is zero, x0 cannot be recovered", "degenerate-alpha-bar")
    x0 = (np.asarray(x_i, dtype=np.float64) - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)
    return np.clip(x0, -1.0, 1.0) if clamp else x0


def noise_from_x0(x_i: np.ndarray, x0_hat: np.ndarray, i: int, sched: DiffusionSchedule) -> np.ndarray:
    ab = sched.alpha_bar[sched.check_index(i)]
    if ab >= 1:
        raise DiffusionError(f"alpha_bar[{i}] is one, the noise is undetermined", "degenerate-alpha-bar")
    return (np.asarray(x_i, dtype=np.float64) - np.sqrt(ab) * x0_hat) / np.sqrt(1.0 - ab)


def ddpm_step(
    x_i: np.ndarray, x0_hat: np.ndarray, i: int, sched: DiffusionSchedule, rng: np.random.Generator
) -> np.ndarray:
    """One ancestral step i -> i-1 from the posterior q(x_{i-1} | x_i, x0_hat); no noise at i = 1."""
    i = sched.check_index(i)
    ab_i, ab_prev = sched.alpha_bar[i], sched.alpha_bar[i - 1]
    beta_i = sched.beta[i]
    mean = (np.sqrt(sched.alpha[i]) * (1.0 - ab_prev) * x_i + np.sqrt(ab_prev) * beta_i * x0_hat) / (1.0 - ab_i)
    if i == 1:
        return mean
    sigma = np.sqrt(beta_i * (1.0 - ab_prev) / (1.0 - ab_i))
    return mean + sigma * rng.standard_normal(np.shape(x_i))


def ddim_coefficients(i: int, j: int, eta: float, sched: DiffusionSchedule) -> Tuple[float, float]:
    ab_i, ab_j = sched.alpha_bar[i], sched.alpha_bar[j]
    c1 = eta * np.sqrt(((1.0 - ab_j) / (1.0 - ab_i)) * (1.0 - ab_i / ab_j))
    # radicand can dip below zero by rounding
    c2 = np.sqrt(max((1.0 - ab_j) - c1**2, 0.0))
    return float(c1), float(c2)


def ddim_step(
    x_i: np.ndarray,
    x0_hat: np.ndarray,
    eps_hat: np.ndarray,
    i: int,
    j: int,
    eta: float,
    sched: DiffusionSchedule,
    rng: np.random.Generator,
) -> np.ndarray:
    i = sched.check_index(i)
    if not 0 <= j < i:
        raise DiffusionError(f"DDIM target step {j} must lie in [0, {i})", "timestep-out-of-range")
    if j == 0:
        return np.asarray(x0_hat, dtype=np.float64)
    c1, c2 = ddim_coefficients(i, j, eta, sched)
    out = np.sqrt(sched.alpha_bar[j]) * x0_hat + c2 * eps_hat
    if c1 > 0:
        out = out + c1 * rng.standard_normal(np.shape(x_i))
    return out


def black_condition(condition: Optional[np.ndarray]) -> Optional[np.ndarray]:
    if condition is None:
        return None
    return np.full(np.shape(condition), AIR_NORMALIZED)


def guided_predict(
    denoiser: Denoiser, x_i: np.ndarray, condition: Optional[np.ndarray], i: int, w: float
) -> np.ndarray:
    """(w + 1) · pred(condition) − w · pred(black); a single call when w = 0."""
    if w < 0:
        raise DiffusionError(f"Guidance weight must be nonnegative, got {w}", "invalid-guidance")
    conditioned = np.asarray(denoiser(x_i, condition, i), dtype=np.float64)
    if w == 0:
        return conditioned
    if not denoiser.supports_unconditional:
        raise DiffusionError(
            f"Denoiser {type(denoiser).__name__} cannot run unconditioned but guidance w={w}",
            "unconditional-unsupported",
        )
    unconditioned = np.asarray(denoiser(x_i, black_condition(condition), i), dtype=np.float64)
    return (w + 1.0) * conditioned - w * unconditioned


def timestep_sequence(T: int, steps: int) -> np.ndarray:
    """Uniformly spaced visited steps from T down to 1 (T always included)."""
    if not 1 <= steps <= T:
        raise DiffusionError(f"steps={steps} must lie in [1, {T}]", "invalid-steps")
    visited = np.floor(np.linspace(T, 1, steps) + 0.5).astype(int)
    return np.unique(visited)[::-1]


def split_prediction(
    prediction: np.ndarray, x_i: np.ndarray, i: int, mode: str, sched: DiffusionSchedule, clamp: bool
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Turn a raw prediction into the (x0_hat, eps_hat) pair. With clamping on,
    eps_hat is re-derived from the clamped x0_hat in either mode.
    """
    if mode == "noise":
        eps_hat = prediction
        x0_hat = x0_from_noise(x_i, eps_hat, i, sched)
        if clamp:
            x0_hat = np.clip(x0_hat, -1.0, 1.0)
            eps_hat = noise_from_x0(x_i, x0_hat, i, sched)
    elif mode == "image":
        x0_hat = np.clip(prediction, -1.0, 1.0) if clamp else prediction
        eps_hat = noise_from_x0(x_i, x0_hat, i, sched)
    else:
        raise DiffusionError(f"Unknown prediction mode '{mode}'", "mode-mismatch")
    return x0_hat, eps_hat


def sample(
    denoiser: Denoiser,
    condition: Optional[np.ndarray],
    shape: Sequence[int],
    cfg: SamplerConfig,
    sched: Optional[DiffusionSchedule] = None,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    sched = sched or cached_schedule(cfg.T, cfg.s)
    rng = rng if rng is not None else np.random.default_rng(0)
    if denoiser.mode != cfg.mode:
        raise DiffusionError(
            f"Denoiser predicts '{denoiser.mode}' but the sampler is configured for '{cfg.mode}'", "mode-mismatch"
        )
    if cfg.sampler == "ddpm" and cfg.steps != sched.T:
        raise DiffusionError(f"The DDPM path needs steps = T = {sched.T}, got {cfg.steps}", "invalid-steps")

    visited = timestep_sequence(sched.T, cfg.steps)
    x = rng.standard_normal(tuple(shape))
    x0_hat = x
    for k, i in enumerate(visited):
        prediction = guided_predict(denoiser, x, condition, int(i), cfg.guidance_w)
        if prediction.shape != x.shape:
            raise DiffusionError(f"Denoiser returned shape {prediction.shape}, expected {x.shape}", "shape-mismatch")
        x0_hat, eps_hat = split_prediction(prediction, x, int(i), cfg.mode, sched, cfg.clamp_x0)
        if cfg.sampler == "ddpm":
            x = ddpm_step(x, x0_hat, int(i), sched, rng)
        else:
            j = int(visited[k + 1]) if k + 1 < len(visited) else 0
            x = ddim_step(x, x0_hat, eps_hat, int(i), j, cfg.eta, sched, rng)
    logger.debug(f"Sampled {tuple(shape)} over {len(visited)} steps ({cfg.sampler}, eta={cfg.eta}, w={cfg.guidance_w})")
    return x0_hat
