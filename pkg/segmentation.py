import logging
from dataclasses import dataclass
from typing import List, Protocol, Tuple, runtime_checkable

import numpy as np
from scipy import ndimage

from config import EvaluationConfig, ExclusionRules
from constants import BONE_THRESHOLD, CRANIOCAUDAL_AXIS, MIN_COMPONENT_VOXELS, POSTERIOR_AXIS
from errors import GeometryError, IntensitySpaceError, SegmentationError
from models import IntensitySpace, LabelVolume, Subregion, Volume
from volume_ops import normalize_ct

logger = logging.getLogger(__name__)

CONNECTIVITY_26 = np.ones((3, 3, 3), dtype=bool)
# a neck narrower than this share of the widest row separates body from posterior elements
NECK_FRACTION = 0.5


@runtime_checkable
class Segmenter(Protocol):
    def __call__(self, ct: Volume) -> Tuple[LabelVolume, LabelVolume]:
        ...


def _as_normalized(ct: Volume) -> Volume:
    if ct.intensity_space is IntensitySpace.HU:
        return normalize_ct(ct)
    if ct.intensity_space is not IntensitySpace.NORMALIZED:
        raise IntensitySpaceError(f"Segmentation expects CT (HU or normalized), got {ct.intensity_space.value}")
    return ct


def posterior_split_row(profile: np.ndarray) -> int:
    """
    Index of the neck row in a per-row area profile running anterior to
    posterior, or the last row when there is no neck (no posterior part).
    """
    profile = np.asarray(profile, dtype=np.float64)
    smooth = ndimage.uniform_filter1d(profile, size=3, mode="nearest")
    widest = int(np.argmax(smooth))
    limit = NECK_FRACTION * smooth[widest]
    for row in range(widest + 1, len(smooth) - 1):
        if smooth[row] < limit and smooth[row + 1] > smooth[row]:
            # the smoothed minimum can sit one row off the raw one
            low = max(row - 1, widest + 1)
            return low + int(np.argmin(profile[low : row + 2]))
    return len(profile) - 1


def split_subregions(component: np.ndarray, axis: int = POSTERIOR_AXIS) -> np.ndarray:
    """Subregion codes for one vertebra mask: body anterior of the neck, posterior behind it."""
    other_axes = tuple(a for a in range(component.ndim) if a != axis)
    profile = component.sum(axis=other_axes)
    rows = np.flatnonzero(profile)
    if rows.size == 0:
        return np.zeros(component.shape, dtype=np.int16)
    first, last = rows[0], rows[-1]
    neck = first + posterior_split_row(profile[first : last + 1])
    shape = [1] * component.ndim
    shape[axis] = component.shape[axis]
    posterior_rows = (np.arange(component.shape[axis]) > neck).reshape(shape)
    out = np.where(component, Subregion.BODY.value, 0).astype(np.int16)
    out[component & posterior_rows] = Subregion.POSTERIOR.value
    return out


def threshold_segment(
    ct: Volume,
    bone_threshold: float = BONE_THRESHOLD,
    min_component: int = MIN_COMPONENT_VOXELS,
) -> Tuple[LabelVolume, LabelVolume]:
    """
    Bone = voxels above `bone_threshold` (normalized). 26-connected components
    of at least `min_component` voxels become vertebrae 1..K, numbered from
    the most cranial one down.
    """
    ct = _as_normalized(ct)
    mask = ct.data > bone_threshold
    if not mask.any():
        raise SegmentationError(f"No voxel above the bone threshold {bone_threshold}", "empty-bone-mask")

    components, count = ndimage.label(mask, structure=CONNECTIVITY_26)
    sizes = np.bincount(components.ravel(), minlength=count + 1)
    kept = [k for k in range(1, count + 1) if sizes[k] >= min_component]
    if not kept:
        raise SegmentationError(
            f"All {count} bone components are smaller than {min_component} voxels", "empty-bone-mask"
        )
    centres = np.array(ndimage.center_of_mass(mask, components, kept)).reshape(-1, 3)
    heights = ct.geometry.index_to_world(centres)[:, CRANIOCAUDAL_AXIS]
    order = [kept[k] for k in np.argsort(-heights, kind="stable")]

    labels = np.zeros(ct.shape, dtype=np.int16)
    subregions = np.zeros(ct.shape, dtype=np.int16)
    objects = ndimage.find_objects(components)
    for new_id, component_id in enumerate(order, start=1):
        box = objects[component_id - 1]
        component = components[box] == component_id
        labels[box][component] = new_id
        split = split_subregions(component)
        subregions[box][component] = split[component]

    logger.info(f"Threshold segmentation found {len(order)} vertebrae ({count - len(kept)} small components dropped)")
    meaning = {k: f"vertebra-{k}" for k in range(1, len(order) + 1)}
    return (
        LabelVolume.on_grid(labels, ct.geometry, meaning),
        LabelVolume.on_grid(subregions, ct.geometry, {1: "body", 2: "posterior"}),
    )


@dataclass(frozen=True)
class ThresholdSegmenter:
    bone_threshold: float = BONE_THRESHOLD
    min_component: int = MIN_COMPONENT_VOXELS

    @classmethod
    def from_config(cls, evaluation: EvaluationConfig) -> "ThresholdSegmenter":
        return cls(evaluation.bone_threshold, evaluation.min_component)

    def __call__(self, ct: Volume) -> Tuple[LabelVolume, LabelVolume]:
        return threshold_segment(ct, self.bone_threshold, self.min_component)


def unsupported_labels(labels: LabelVolume, rules: ExclusionRules) -> List[int]:
    """
    Ids a CT segmenter would not deliver: configured sacrum labels, and
    vertebrae cut by the volume boundary, i.e. whose voxels on any face of
    the volume cover at least `boundary_fraction` of their widest cross-section
    along that axis.
    """
    dropped = []
    data = labels.data
    for vertebra_id in labels.labels:
        if vertebra_id in rules.sacrum_labels:
            dropped.append(vertebra_id)
            continue
        mask = data == vertebra_id
        for axis in range(3):
            other_axes = tuple(a for a in range(3) if a != axis)
            cross_sections = mask.sum(axis=other_axes)
            widest = cross_sections.max()
            face = max(cross_sections[0], cross_sections[-1])
            if widest and face / widest >= rules.boundary_fraction:
                dropped.append(vertebra_id)
                break
    return dropped


def exclude_unsupported(labels: LabelVolume, rules: ExclusionRules) -> LabelVolume:
    dropped = unsupported_labels(labels, rules)
    if not dropped:
        return labels
    logger.info(f"Excluding unsupported vertebrae {dropped}")
    return labels.with_data(np.where(np.isin(labels.data, dropped), 0, labels.data).astype(labels.data.dtype))


def match_labels(seg: LabelVolume, reference: LabelVolume) -> LabelVolume:
    """
    Renumber `seg` to the reference ids by largest voxel overlap; segments
    touching no reference vertebra become background.
    """
    if not seg.geometry.matches(reference.geometry):
        raise GeometryError("Segmentation and reference are not on the same grid")
    out = np.zeros_like(seg.data)
    for seg_id in seg.labels:
        mask = seg.data == seg_id
        overlap = np.bincount(reference.data[mask].ravel().astype(np.int64))
        overlap[0] = 0
        if overlap.sum() == 0:
            logger.debug(f"Segment {seg_id} overlaps no reference vertebra")
            continue
        out[mask] = int(np.argmax(overlap))
    return seg.with_data(out)
