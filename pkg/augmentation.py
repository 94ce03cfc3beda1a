import logging
from typing import List, NamedTuple, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from config import DeformSpec
from constants import JITTER_BRIGHTNESS, JITTER_CONTRAST
from errors import GeometryError, IntensitySpaceError
from models import IntensitySpace, LabelVolume, Volume
from volume_ops import normalize_mr

logger = logging.getLogger(__name__)

Image = Union[np.ndarray, Volume]
SeedLike = Union[int, np.random.Generator, np.random.SeedSequence]


class AugmentedSample(NamedTuple):
    mr: Volume
    ct: Volume
    labels: LabelVolume
    subregions: LabelVolume


def unit_displacement(shape: Sequence[int], control_grid: Sequence[int], seed: SeedLike) -> np.ndarray:
    """
    Dense (3, *shape) displacement field in units of sigma: N(0, 1) offsets on
    a coarse control grid spanning the volume, upsampled with cubic B-splines.
    """
    rng = np.random.default_rng(seed)
    control = rng.standard_normal((3,) + tuple(control_grid))
    coords = np.meshgrid(
        *[np.linspace(0.0, g - 1.0, n) for n, g in zip(shape, control_grid)],
        indexing="ij",
    )
    return np.stack(
        [ndimage.map_coordinates(control[k], coords, order=3, mode="nearest") for k in range(3)]
    )


def elastic_deform(
    vols: Sequence[Volume],
    labels: Sequence[LabelVolume],
    spec: DeformSpec,
) -> Tuple[List[Volume], List[LabelVolume]]:
    """
    Warp every input with one random smooth field. The field is sigma (mm)
    times a unit field fixed by the seed, so amplitude scales linearly with
    sigma; scalars are trilinear, labels nearest-neighbour.
    """
    inputs = list(vols) + list(labels)
    if not inputs:
        return [], []
    geometry = inputs[0].geometry
    for item in inputs[1:]:
        if not geometry.matches(item.geometry):
            raise GeometryError("elastic_deform inputs must share one grid")
    if spec.sigma == 0:
        return [v.with_data(v.data.copy()) for v in vols], [lab.with_data(lab.data.copy()) for lab in labels]

    field = unit_displacement(geometry.shape, spec.control_grid, spec.seed)
    displacement = field * (spec.sigma / geometry.spacing).reshape(3, 1, 1, 1)
    identity = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in geometry.shape], indexing="ij")
    coords = np.stack(identity) + displacement
    logger.debug(f"Elastic field max displacement {np.abs(displacement).max():.2f} voxels")

    out_vols = [
        v.with_data(ndimage.map_coordinates(v.data.astype(np.float64), coords, order=1, mode="nearest"))
        for v in vols
    ]
    out_labels = [
        lab.with_data(ndimage.map_coordinates(lab.data, coords, order=0, mode="nearest").astype(lab.data.dtype))
        for lab in labels
    ]
    return out_vols, out_labels


def apply_jitter(image: np.ndarray, a: float, b: float) -> np.ndarray:
    """clamp(a * (x - mean) + mean + b, -1, 1)"""
    image = np.asarray(image, dtype=np.float64)
    mean = image.mean()
    return np.clip(a * (image - mean) + mean + b, -1.0, 1.0)


def intensity_jitter(
    img: Image,
    brightness: float = JITTER_BRIGHTNESS,
    contrast: float = JITTER_CONTRAST,
    seed: SeedLike = 0,
) -> Image:
    if isinstance(img, Volume):
        if img.intensity_space is not IntensitySpace.NORMALIZED:
            raise IntensitySpaceError(f"Jitter expects a normalized image, got {img.intensity_space.value}")
        data = img.data
    else:
        data = np.asarray(img)
        if data.size and (data.min() < -1 or data.max() > 1):
            raise IntensitySpaceError("Jitter expects values in [-1, 1]")
    rng = np.random.default_rng(seed)
    a = rng.uniform(1.0 - contrast, 1.0 + contrast)
    b = rng.uniform(-brightness, brightness)
    out = apply_jitter(data, a, b)
    return img.with_data(out) if isinstance(img, Volume) else out


def augment_sample(
    mr: Volume,
    ct: Volume,
    labels: LabelVolume,
    subregions: LabelVolume,
    spec: DeformSpec,
    copies: int,
    brightness: float = JITTER_BRIGHTNESS,
    contrast: float = JITTER_CONTRAST,
) -> List[AugmentedSample]:
    """
    The standard recipe: deform MR, CT and labels together, then jitter the
    normalized MR only. Each copy gets its own child seed of `spec.seed`.
    """
    if mr.intensity_space is IntensitySpace.MR_RAW:
        mr = normalize_mr(mr)
    samples = []
    for child in np.random.SeedSequence(spec.seed).spawn(copies):
        deform_seed, jitter_seed = child.spawn(2)
        (mr_def, ct_def), (labels_def, sub_def) = elastic_deform(
            [mr, ct], [labels, subregions], spec.model_copy(update={"seed": int(deform_seed.generate_state(1)[0])})
        )
        mr_def = intensity_jitter(mr_def, brightness, contrast, jitter_seed)
        samples.append(AugmentedSample(mr_def, ct_def, labels_def, sub_def))
    logger.info(f"Generated {len(samples)} augmented copies")
    return samples
