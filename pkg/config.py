"""
Pipeline configuration.

The configuration document is a dotenv-style key-value file. Dotted keys
select a section, e.g.::

    seed=42
    denoiser=single-target
    paths.output_dir=out
    paths.mr=out/mr.nii.gz
    sampler.steps=20
    sampler.eta=1.0
    registration.mode=two-point
    ablation.steps=10,20,50
    paths.methods.ddim=out/ddim/synth_ct.nii.gz

List values are comma separated. `--set key=value` overrides are applied on
top of the file before validation.
"""

import logging
from pathlib import Path
from typing import Annotated, Dict, List, Literal, Optional, Sequence, Tuple

from dotenv import dotenv_values
from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, field_validator, model_validator

from constants import (
    ABLATION_ETAS,
    ABLATION_STEPS,
    ABLATION_WS,
    BONE_THRESHOLD,
    BOUNDARY_FRACTION,
    CONFIG_BAD_OVERRIDE,
    CONFIG_FILE_NOT_FOUND,
    CONFIG_MISSING_PATH,
    CONFIG_PATH_NOT_FOUND,
    COSINE_S,
    CROP_SIZE_2D,
    DDIM_ETA,
    DDIM_STEPS_2D,
    DEFORM_CONTROL_GRID,
    DEFORM_SIGMA_MM,
    DIFFUSION_T,
    GUIDANCE_W,
    ISO_SPACING_MM,
    JITTER_BRIGHTNESS,
    JITTER_CONTRAST,
    LANDMARK_JITTER_MM,
    MASK_RADIUS_PX,
    MIN_COMPONENT_VOXELS,
    PAD_MULTIPLE,
    PATCH_SIZE_3D,
    PATCH_STRIDE_3D,
    PSNR_PEAK,
    TILE_STRIDE_2D,
)
from errors import ConfigError

logger = logging.getLogger(__name__)


def _split_csv(value):
    if isinstance(value, str):
        return [part.strip() for part in value.split(",") if part.strip()]
    return value


Int3 = Annotated[Tuple[int, int, int], BeforeValidator(_split_csv)]
Int2 = Annotated[Tuple[int, int], BeforeValidator(_split_csv)]
Float3 = Annotated[Tuple[float, float, float], BeforeValidator(_split_csv)]
IntList = Annotated[List[int], BeforeValidator(_split_csv)]
FloatList = Annotated[List[float], BeforeValidator(_split_csv)]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PhantomConfig(_Section):
    n_vertebrae: int = Field(5, ge=2)
    body_radius: float = Field(15.0, gt=0)
    body_height: float = Field(20.0, gt=0)
    disc_gap: float = Field(8.0, gt=0)
    process_length: float = Field(30.0, gt=0)
    process_width: float = Field(8.0, gt=0)
    curvature: float = Field(3.0, ge=0)
    noise_sigma: float = Field(10.0, ge=0)
    seed: int = 0
    spacing: float = Field(1.0, gt=0)
    margin: float = Field(12.0, gt=0)
    misalign_degrees: float = 0.0
    misalign_translation: Float3 = (0.0, 0.0, 0.0)
    landmark_jitter_mm: float = Field(LANDMARK_JITTER_MM, ge=0)
    augment_copies: int = Field(0, ge=0)


class DeformSpec(_Section):
    control_grid: Int3 = DEFORM_CONTROL_GRID
    sigma: float = Field(DEFORM_SIGMA_MM, ge=0)
    seed: int = 0

    @field_validator("control_grid")
    @classmethod
    def _grid_at_least_two(cls, value):
        if min(value) < 2:
            raise ValueError(f"control_grid needs at least 2 points per axis, got {value}")
        return value


class SamplerConfig(_Section):
    mode: Literal["noise", "image"] = "image"
    sampler: Literal["ddim", "ddpm"] = "ddim"
    eta: float = Field(DDIM_ETA, ge=0, le=1)
    steps: int = Field(DDIM_STEPS_2D, ge=1)
    guidance_w: float = Field(GUIDANCE_W, ge=0)
    clamp_x0: bool = True
    T: int = Field(DIFFUSION_T, ge=1)
    s: float = Field(COSINE_S, gt=0)

    @model_validator(mode="after")
    def _steps_within_schedule(self):
        if self.steps > self.T:
            raise ValueError(f"steps={self.steps} exceeds T={self.T}")
        if self.sampler == "ddpm" and self.steps != self.T:
            raise ValueError(f"The DDPM path visits every step: steps must equal T={self.T}")
        return self


class OracleConfig(_Section):
    """Parameters of the gaussian-posterior denoiser (data ~ N(mu, s²) per voxel)."""

    mu: float = 0.0
    s: float = Field(0.5, ge=0)


class RegistrationConfig(_Section):
    mode: Literal["one-point", "two-point", "none"] = "two-point"


class PreprocessingConfig(_Section):
    recipe: Literal["2d", "3d"] = "2d"
    crop_size: Int2 = CROP_SIZE_2D
    tile_stride: Int2 = TILE_STRIDE_2D
    patch_size: Int3 = PATCH_SIZE_3D
    patch_stride: Int3 = PATCH_STRIDE_3D
    iso_spacing: Float3 = ISO_SPACING_MM
    pad_multiple: int = Field(PAD_MULTIPLE, ge=1)
    deform: DeformSpec = DeformSpec()
    jitter_brightness: float = Field(JITTER_BRIGHTNESS, ge=0)
    jitter_contrast: float = Field(JITTER_CONTRAST, ge=0)


class ExclusionRules(_Section):
    sacrum_labels: IntList = []
    boundary_fraction: float = Field(BOUNDARY_FRACTION, gt=0)


class EvaluationConfig(_Section):
    mask_radius: float = Field(MASK_RADIUS_PX, ge=0)
    posterior: bool = True
    psnr_peak: float = Field(PSNR_PEAK, gt=0)
    bone_threshold: float = BONE_THRESHOLD
    min_component: int = Field(MIN_COMPONENT_VOXELS, ge=1)
    exclusion: ExclusionRules = ExclusionRules()


class AblationConfig(_Section):
    steps: IntList = ABLATION_STEPS
    etas: FloatList = ABLATION_ETAS
    ws: FloatList = ABLATION_WS


class PathsConfig(_Section):
    output_dir: Path = Path("out")
    mr: Optional[Path] = None
    ct: Optional[Path] = None
    ct_labels: Optional[Path] = None
    ct_subregions: Optional[Path] = None
    mr_landmarks: Optional[Path] = None
    ct_landmarks: Optional[Path] = None
    reference_ct: Optional[Path] = None
    reference_labels: Optional[Path] = None
    reference_subregions: Optional[Path] = None
    segment_input: Optional[Path] = None
    predictions_dir: Optional[Path] = None
    methods: Dict[str, Path] = {}


class PipelineConfig(_Section):
    seed: int
    jobs: int = Field(1, ge=1)
    denoiser: Literal["single-target", "gaussian-posterior", "zero", "external"] = "single-target"
    paths: PathsConfig = PathsConfig()
    registration: RegistrationConfig = RegistrationConfig()
    sampler: SamplerConfig = SamplerConfig()
    oracle: OracleConfig = OracleConfig()
    preprocessing: PreprocessingConfig = PreprocessingConfig()
    evaluation: EvaluationConfig = EvaluationConfig()
    ablation: AblationConfig = AblationConfig()
    phantom: PhantomConfig = PhantomConfig()


# inputs each command reads; checked before any output is written
REQUIRED_INPUTS = {
    "phantom": [],
    "register": ["mr", "ct"],
    "segment": ["segment_input"],
    "translate": ["mr"],
    "evaluate": ["reference_ct", "reference_labels"],
    "ablate": ["mr", "reference_ct", "reference_labels"],
}


def _nest(flat: Dict[str, str]) -> dict:
    nested: dict = {}
    for key, value in flat.items():
        parts = key.strip().split(".")
        node = nested
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"Config key '{key}' conflicts with scalar '{part}'")
            node = child
        node[parts[-1]] = value
    return nested


def parse_overrides(items: Sequence[str]) -> Dict[str, str]:
    overrides = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(CONFIG_BAD_OVERRIDE.format(item=item))
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def load_config(
    path: Optional[Path] = None,
    overrides: Optional[Sequence[str]] = None,
    seed: Optional[int] = None,
    jobs: Optional[int] = None,
) -> PipelineConfig:
    flat: Dict[str, str] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(CONFIG_FILE_NOT_FOUND.format(path=path))
        flat.update({k: v for k, v in dotenv_values(path).items() if v is not None})
    flat.update(parse_overrides(overrides))
    if seed is not None:
        flat["seed"] = str(seed)
    if jobs is not None:
        flat["jobs"] = str(jobs)
    config = PipelineConfig.model_validate(_nest(flat))
    logger.debug(f"Loaded config with {len(flat)} keys")
    return config


def validate_for(config: PipelineConfig, command: str) -> None:
    """Fail before any work if an input the command needs is unset or missing."""
    for key in REQUIRED_INPUTS[command]:
        value = getattr(config.paths, key)
        if value is None:
            raise ConfigError(CONFIG_MISSING_PATH.format(key=f"paths.{key}", command=command))
        if not Path(value).exists():
            raise ConfigError(CONFIG_PATH_NOT_FOUND.format(key=f"paths.{key}", path=value))
    if command == "register" and config.registration.mode != "none":
        if config.paths.mr_landmarks is None or not Path(config.paths.mr_landmarks).exists():
            raise ConfigError(CONFIG_MISSING_PATH.format(key="paths.mr_landmarks", command=command))
        if config.paths.ct_landmarks is None and config.paths.ct_labels is None:
            raise ConfigError(CONFIG_MISSING_PATH.format(key="paths.ct_labels or paths.ct_landmarks", command=command))
        for key in ("ct_labels", "ct_subregions", "ct_landmarks"):
            value = getattr(config.paths, key)
            if value is not None and not Path(value).exists():
                raise ConfigError(CONFIG_PATH_NOT_FOUND.format(key=f"paths.{key}", path=value))
    if command == "evaluate" and not config.paths.methods:
        raise ConfigError(CONFIG_MISSING_PATH.format(key="paths.methods.<name>", command=command))
    if command == "evaluate":
        for name, value in config.paths.methods.items():
            if not Path(value).exists():
                raise ConfigError(CONFIG_PATH_NOT_FOUND.format(key=f"paths.methods.{name}", path=value))
    if command in ("translate", "ablate"):
        if config.denoiser == "single-target" and config.paths.reference_ct is None:
            raise ConfigError(CONFIG_MISSING_PATH.format(key="paths.reference_ct", command=command))
        if config.denoiser == "external" and (
            config.paths.predictions_dir is None or not Path(config.paths.predictions_dir).is_dir()
        ):
            raise ConfigError(CONFIG_MISSING_PATH.format(key="paths.predictions_dir", command=command))
        if config.sampler.guidance_w > 0 and config.denoiser == "external":
            logger.info("Guidance with external predictions needs uncond_* files next to the conditioned ones")
