import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Optional, Union

import numpy as np

from constants import AIR_NORMALIZED
from diffusion import DiffusionSchedule, cached_schedule, noise_from_x0
from errors import DiffusionError
from models import IntensitySpace
from nifti_io import read_nifti

logger = logging.getLogger(__name__)

MODES = ("noise", "image")


def _check_mode(mode: str) -> str:
    if mode not in MODES:
        raise DiffusionError(f"Unknown denoiser mode '{mode}'", "mode-mismatch")
    return mode


@dataclass
class SingleTargetOracle:
    """Knows the answer: predicts x* (image mode) or the noise that leads from x* to x_i."""

    target: np.ndarray
    mode: str = "noise"
    sched: DiffusionSchedule = field(default_factory=cached_schedule)
    supports_unconditional: bool = True

    def __post_init__(self):
        _check_mode(self.mode)
        self.target = np.asarray(self.target, dtype=np.float64)

    def __call__(self, x_i, condition, i):
        if np.shape(x_i) != self.target.shape:
            raise DiffusionError(f"Oracle target {self.target.shape} does not match x_i {np.shape(x_i)}", "shape-mismatch")
        if self.mode == "image":
            return self.target.copy()
        return noise_from_x0(x_i, self.target, i, self.sched)


@dataclass
class GaussianPosteriorOracle:
    """
    Exact posterior mean for data x0 ~ N(mu, s²) per element:
    E[x0 | x_i] = mu + √ᾱ s² / (ᾱ s² + 1 − ᾱ) · (x_i − √ᾱ mu).
    """

    mu: float = 0.0
    s: float = 1.0
    mode: str = "image"
    sched: DiffusionSchedule = field(default_factory=cached_schedule)
    supports_unconditional: bool = True

    def __post_init__(self):
        _check_mode(self.mode)
        if self.s < 0:
            raise DiffusionError(f"Posterior oracle needs s >= 0, got {self.s}", "invalid-denoiser")

    def __call__(self, x_i, condition, i):
        ab = self.sched.alpha_bar[self.sched.check_index(i)]
        gain = np.sqrt(ab) * self.s**2 / (ab * self.s**2 + 1.0 - ab)
        x0 = self.mu + gain * (np.asarray(x_i, dtype=np.float64) - np.sqrt(ab) * self.mu)
        if self.mode == "image":
            return x0
        return noise_from_x0(x_i, x0, i, self.sched)


@dataclass
class ZeroDenoiser:
    mode: str = "noise"
    supports_unconditional: bool = True

    def __post_init__(self):
        _check_mode(self.mode)

    def __call__(self, x_i, condition, i):
        return np.zeros(np.shape(x_i))


@dataclass
class ExternalPredictionDenoiser:
    """
    Reads `tile{k:04d}_t{i:04d}.nii.gz` from `directory` for tile k at step i.
    Unconditioned predictions (for guidance) live beside them as
    `uncond_tile{k:04d}_t{i:04d}.nii.gz`; a call whose condition is entirely
    black reads the unconditioned file when one exists.
    """

    directory: Path
    mode: str = "noise"
    tile: int = 0

    def __post_init__(self):
        _check_mode(self.mode)
        self.directory = Path(self.directory)
        if not self.directory.is_dir():
            raise DiffusionError(f"Prediction directory not found: {self.directory}", "missing-prediction")

    @property
    def supports_unconditional(self) -> bool:
        return any(self.directory.glob(f"uncond_tile{self.tile:04d}_t*.nii*"))

    def for_tile(self, tile: int) -> "ExternalPredictionDenoiser":
        return ExternalPredictionDenoiser(self.directory, self.mode, tile)

    def _path(self, i: int, unconditional: bool) -> Optional[Path]:
        stem = f"{'uncond_' if unconditional else ''}tile{self.tile:04d}_t{int(i):04d}"
        for suffix in (".nii.gz", ".nii"):
            path = self.directory / f"{stem}{suffix}"
            if path.exists():
                return path
        return None

    def __call__(self, x_i, condition, i):
        unconditional = condition is not None and bool(np.all(np.asarray(condition) == AIR_NORMALIZED))
        path = self._path(i, unconditional) if unconditional else None
        path = path or self._path(i, False)
        if path is None:
            raise DiffusionError(
                f"No prediction for tile {self.tile} at step {i} in {self.directory}", "missing-prediction"
            )
        # raw predictions carry no range constraint (noise mode is unbounded)
        _, volume = read_nifti(path, kind="scalar", intensity_space=IntensitySpace.MR_RAW)
        data = np.asarray(volume.data, dtype=np.float64)
        data = data.reshape(np.shape(x_i)) if data.size == np.size(x_i) and data.ndim != np.ndim(x_i) else data
        if data.shape != np.shape(x_i):
            raise DiffusionError(f"{path.name} has shape {data.shape}, expected {np.shape(x_i)}", "shape-mismatch")
        logger.debug(f"Loaded prediction {path.name}")
        return data


DENOISERS: Dict[str, Callable[..., object]] = {
    "single-target": SingleTargetOracle,
    "gaussian-posterior": GaussianPosteriorOracle,
    "zero": ZeroDenoiser,
    "external": ExternalPredictionDenoiser,
}


def build_denoiser(name: str, **kwargs) -> Union[SingleTargetOracle, GaussianPosteriorOracle, ZeroDenoiser, ExternalPredictionDenoiser]:
    if name not in DENOISERS:
        raise DiffusionError(f"Unknown denoiser '{name}', choose from {sorted(DENOISERS)}", "unknown-denoiser")
    return DENOISERS[name](**kwargs)
