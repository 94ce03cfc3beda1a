import logging
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Union

import numpy as np
from scipy import ndimage

from config import PhantomConfig
from models import Geometry, IntensitySpace, LabelVolume, RigidTransform, Subregion, Volume
from volume_ops import grid_points, sample_world, warp_rigid

logger = logging.getLogger(__name__)

CT_AIR = -1000.0
CT_SOFT_TISSUE = 40.0
CT_CANCELLOUS = 800.0
CT_CORTICAL = 1000.0

MR_AIR = 0.0
MR_SOFT_TISSUE = 400.0
MR_MARROW = 900.0
MR_CORTICAL = 60.0

CORTICAL_SHELL_MM = 2.0
SUBREGION_MEANING = {Subregion.BODY.value: "body", Subregion.POSTERIOR.value: "posterior"}


class Phantom(NamedTuple):
    mr: Volume
    ct: Volume
    labels: LabelVolume
    subregions: LabelVolume


class Misaligned(NamedTuple):
    ct: Volume
    labels: LabelVolume
    subregions: Optional[LabelVolume]


@dataclass(frozen=True)
class VertebraLayout:
    vertebra_id: int
    body_center: np.ndarray
    process_min: np.ndarray
    process_max: np.ndarray

    @property
    def process_center(self) -> np.ndarray:
        return (self.process_min + self.process_max) / 2.0


def phantom_geometry(cfg: PhantomConfig) -> Geometry:
    extent = np.array(
        [
            2 * (cfg.body_radius + cfg.curvature + cfg.margin),
            2 * (cfg.body_radius + cfg.margin) + cfg.process_length,
            cfg.n_vertebrae * cfg.body_height + (cfg.n_vertebrae - 1) * cfg.disc_gap + 2 * cfg.margin,
        ]
    )
    shape = tuple(int(n) for n in np.ceil(extent / cfg.spacing).astype(int) + 1)
    return Geometry(shape, np.full(3, cfg.spacing), np.zeros(3), np.eye(3))


def vertebra_layout(cfg: PhantomConfig) -> List[VertebraLayout]:
    """Analytic placement; id 1 is the most cranial vertebra."""
    geometry = phantom_geometry(cfg)
    extent = (np.asarray(geometry.shape) - 1) * cfg.spacing
    x_mid = extent[0] / 2.0
    y_body = cfg.margin + cfg.body_radius
    process_height = cfg.body_height / 2.0
    layout = []
    for k in range(cfg.n_vertebrae):
        z = cfg.margin + cfg.body_height / 2.0 + k * (cfg.body_height + cfg.disc_gap)
        x = x_mid + cfg.curvature * np.sin(np.pi * (k + 0.5) / cfg.n_vertebrae)
        center = np.array([x, y_body, z])
        process_min = np.array([x - cfg.process_width / 2.0, y_body + cfg.body_radius, z - process_height / 2.0])
        process_max = np.array(
            [x + cfg.process_width / 2.0, y_body + cfg.body_radius + cfg.process_length, z + process_height / 2.0]
        )
        layout.append(VertebraLayout(cfg.n_vertebrae - k, center, process_min, process_max))
    return layout


def generate_phantom(cfg: PhantomConfig) -> Phantom:
    geometry = phantom_geometry(cfg)
    points = grid_points(geometry)
    labels = np.zeros(geometry.shape, dtype=np.int16)
    subregions = np.zeros(geometry.shape, dtype=np.int16)

    for vertebra in vertebra_layout(cfg):
        offset = points - vertebra.body_center
        semi_axes = np.array([cfg.body_radius, cfg.body_radius, cfg.body_height / 2.0])
        body = np.sum((offset / semi_axes) ** 2, axis=-1) <= 1.0
        process = np.all((points >= vertebra.process_min) & (points <= vertebra.process_max), axis=-1)
        labels[body | process] = vertebra.vertebra_id
        subregions[body] = Subregion.BODY.value
        subregions[process] = Subregion.POSTERIOR.value

    bone = labels > 0
    shell_voxels = max(int(round(CORTICAL_SHELL_MM / cfg.spacing)), 1)
    marrow = np.zeros_like(bone)
    for vertebra_id in np.unique(labels[bone]):
        marrow |= ndimage.binary_erosion(labels == vertebra_id, iterations=shell_voxels)
    cortical = bone & ~marrow

    extent = (np.asarray(geometry.shape) - 1) * cfg.spacing
    torso_center = extent[:2] / 2.0
    torso_axes = extent[:2] / 2.0 - cfg.margin / 3.0
    torso = np.sum(((points[..., :2] - torso_center) / torso_axes) ** 2, axis=-1) <= 1.0

    ct = np.full(geometry.shape, CT_AIR)
    ct[torso] = CT_SOFT_TISSUE
    ct[marrow] = CT_CANCELLOUS
    ct[cortical] = CT_CORTICAL

    mr = np.full(geometry.shape, MR_AIR)
    mr[torso] = MR_SOFT_TISSUE
    mr[marrow] = MR_MARROW
    mr[cortical] = MR_CORTICAL

    if cfg.noise_sigma > 0:
        rng = np.random.default_rng(cfg.seed)
        ct = ct + rng.normal(0.0, cfg.noise_sigma, geometry.shape)
        mr = np.clip(mr + rng.normal(0.0, cfg.noise_sigma, geometry.shape), 0.0, None)

    label_meaning = {v.vertebra_id: f"vertebra-{v.vertebra_id}" for v in vertebra_layout(cfg)}
    logger.info(f"Generated phantom with {cfg.n_vertebrae} vertebrae on grid {geometry.shape}")
    return Phantom(
        mr=Volume.on_grid(mr, geometry, IntensitySpace.MR_RAW),
        ct=Volume.on_grid(ct, geometry, IntensitySpace.HU),
        labels=LabelVolume.on_grid(labels, geometry, label_meaning),
        subregions=LabelVolume.on_grid(subregions, geometry, SUBREGION_MEANING),
    )


def _soft_tissue_value(ct: Volume) -> float:
    if ct.intensity_space is IntensitySpace.HU:
        return CT_SOFT_TISSUE
    if ct.intensity_space is IntensitySpace.NORMALIZED:
        return CT_SOFT_TISSUE / 1000.0
    return MR_SOFT_TISSUE


def misalign(
    ct: Volume,
    labels: LabelVolume,
    transform: Union[RigidTransform, Dict[int, RigidTransform]],
    subregions: Optional[LabelVolume] = None,
) -> Misaligned:
    """
    Move the CT and its labels by a known rigid transform, either one global
    transform or a per-vertebra mapping (unlisted vertebrae stay put).
    """
    if isinstance(transform, RigidTransform):
        return Misaligned(
            warp_rigid(ct, transform),
            warp_rigid(labels, transform),
            warp_rigid(subregions, transform) if subregions is not None else None,
        )

    points = grid_points(ct.geometry)
    flat_points = points.reshape(-1, 3)
    moving = [vid for vid in transform if vid in labels.labels]
    vacated = np.isin(labels.data, moving)
    ct_out = np.array(ct.data, dtype=np.float64)
    ct_out[vacated] = _soft_tissue_value(ct)
    labels_out = np.where(vacated, 0, labels.data).astype(labels.data.dtype)
    sub_out = None
    if subregions is not None:
        sub_out = np.where(vacated, 0, subregions.data).astype(subregions.data.dtype)

    for vertebra_id in moving:
        source = transform[vertebra_id].inverse().apply(flat_points).reshape(points.shape)
        landed = sample_world(labels, source) == vertebra_id
        ct_out[landed] = sample_world(ct, source)[landed]
        labels_out[landed] = vertebra_id
        if subregions is not None:
            sub_out[landed] = sample_world(subregions, source)[landed]

    logger.debug(f"Applied per-vertebra misalignment to ids {moving}")
    return Misaligned(
        ct.with_data(ct_out),
        labels.with_data(labels_out),
        subregions.with_data(sub_out) if subregions is not None else None,
    )
