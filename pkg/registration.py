import logging
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from scipy import ndimage

from constants import COLLINEARITY_RATIO, TWO_POINT_MISSING_SPINOUS
from errors import RegistrationError
from models import Geometry, LabelVolume, Landmark, LandmarkSet, RigidTransform, Subregion
from reports import FitReport
from volume_ops import AnyVolume, warp_rigid

logger = logging.getLogger(__name__)

FIT_MODES = ("one-point", "two-point")


def _centres(labels: np.ndarray, ids: List[int], geometry: Geometry) -> np.ndarray:
    """World-space mean voxel position per id (NaN rows for ids with no voxels)."""
    index = np.array(ndimage.center_of_mass(np.ones(labels.shape), labels, ids), dtype=np.float64).reshape(-1, 3)
    return geometry.index_to_world(index)


def extract_centroids(labels: LabelVolume, subregions: Optional[LabelVolume] = None) -> LandmarkSet:
    ids = labels.labels
    if not ids:
        raise RegistrationError("Label volume has no vertebrae to take centroids from", "empty-label")
    geometry = labels.geometry
    if subregions is None:
        bodies = _centres(labels.data, ids, geometry)
        return LandmarkSet(tuple(Landmark(vid, body) for vid, body in zip(ids, bodies)))

    if not geometry.matches(subregions.geometry):
        raise RegistrationError("Labels and subregions are not on the same grid", "geometry-mismatch")
    body_labels = np.where(subregions.data == Subregion.BODY.value, labels.data, 0)
    posterior_labels = np.where(subregions.data == Subregion.POSTERIOR.value, labels.data, 0)
    bodies = _centres(body_labels, ids, geometry)
    spinous = _centres(posterior_labels, ids, geometry)
    whole = _centres(labels.data, ids, geometry)

    entries = []
    for vid, body, process, fallback in zip(ids, bodies, spinous, whole):
        if not np.all(np.isfinite(body)):
            logger.warning(f"Vertebra {vid} has no body subregion, using the whole vertebra")
            body = fallback
        entries.append(Landmark(vid, body, process if np.all(np.isfinite(process)) else None))
    return LandmarkSet(tuple(entries))


def regenerate_landmarks(seg: LabelVolume, subregions: LabelVolume) -> LandmarkSet:
    """Landmarks from a segmentation of the synthesized CT, closing the register/translate/segment loop."""
    landmarks = extract_centroids(seg, subregions)
    logger.info(f"Regenerated landmarks for vertebrae {landmarks.ids}")
    return landmarks


def perturb_landmarks(landmarks: LandmarkSet, sigma_mm: float, rng: np.random.Generator) -> LandmarkSet:
    """Gaussian jitter on every point, standing in for manually clicked MR landmarks."""
    if sigma_mm <= 0:
        return landmarks
    entries = []
    for entry in landmarks:
        body = entry.body + rng.normal(0.0, sigma_mm, 3)
        spinous = entry.spinous + rng.normal(0.0, sigma_mm, 3) if entry.spinous is not None else None
        entries.append(Landmark(entry.vertebra_id, body, spinous))
    return LandmarkSet(tuple(entries))


def _matched_points(src: LandmarkSet, dst: LandmarkSet, mode: str) -> Tuple[np.ndarray, np.ndarray, List[int]]:
    ids = sorted(set(src.ids) & set(dst.ids))
    if mode == "two-point":
        missing = [vid for vid in ids if src.get(vid).spinous is None or dst.get(vid).spinous is None]
        if missing:
            raise RegistrationError(TWO_POINT_MISSING_SPINOUS.format(ids=missing), "missing-spinous")
    a, b = [], []
    for vid in ids:
        a.append(src.get(vid).body)
        b.append(dst.get(vid).body)
        if mode == "two-point":
            a.append(src.get(vid).spinous)
            b.append(dst.get(vid).spinous)
    return np.array(a).reshape(-1, 3), np.array(b).reshape(-1, 3), ids


def _minimal_rotation(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Smallest rotation taking unit vector u onto unit vector v."""
    axis = np.cross(u, v)
    sin_angle = np.linalg.norm(axis)
    cos_angle = float(np.clip(np.dot(u, v), -1.0, 1.0))
    if sin_angle < 1e-12:
        if cos_angle > 0:
            return np.eye(3)
        # antiparallel: half turn about any axis perpendicular to u
        helper = np.eye(3)[np.argmin(np.abs(u))]
        axis = np.cross(u, helper)
        axis /= np.linalg.norm(axis)
        return 2.0 * np.outer(axis, axis) - np.eye(3)
    return RigidTransform.about_axis(axis, np.rad2deg(np.arctan2(sin_angle, cos_angle))).rotation


def _principal_direction(points: np.ndarray) -> np.ndarray:
    _, _, vt = np.linalg.svd(points)
    return vt[0]


def fit_rigid(src: LandmarkSet, dst: LandmarkSet, mode: str = "two-point") -> Tuple[RigidTransform, FitReport]:
    """
    Least-squares rigid transform T with dst ≈ T(src), matched by vertebra id.

    Rank-deficient (collinear) point sets still return a transform: the
    rotation is then the minimal one aligning the two lines, so any spin
    about the line is left out and `collinear` is set in the report.
    """
    if mode not in FIT_MODES:
        raise RegistrationError(f"Unknown fit mode '{mode}'", "invalid-mode")
    a, b, ids = _matched_points(src, dst, mode)
    if len(a) < 3:
        raise RegistrationError(f"Need at least 3 matched points, got {len(a)} (ids {ids})", "too-few-points")

    centroid_a = a.mean(axis=0)
    centroid_b = b.mean(axis=0)
    aa = a - centroid_a
    bb = b - centroid_b
    h = aa.T @ bb
    u, s, vt = np.linalg.svd(h)
    collinear = bool(s[0] == 0 or s[1] < COLLINEARITY_RATIO * s[0])

    if collinear:
        direction_a = _principal_direction(aa)
        direction_b = _principal_direction(bb)
        if np.dot(aa @ direction_a, bb @ direction_b) < 0:
            direction_b = -direction_b
        rotation = _minimal_rotation(direction_a, direction_b) if s[0] > 0 else np.eye(3)
        logger.warning(f"Landmarks for ids {ids} are collinear; rotation about the column axis is unconstrained")
    else:
        # reflection guard
        d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
        rotation = vt.T @ np.diag([1.0, 1.0, d]) @ u.T

    transform = RigidTransform(rotation, centroid_b - rotation @ centroid_a)
    residual = transform.apply(a) - b
    rms = float(np.sqrt(np.mean(np.sum(residual**2, axis=1))))
    report = FitReport(
        mode=mode,
        n_points=len(a),
        rms=rms,
        collinear=collinear,
        rotation=transform.rotation.tolist(),
        translation=transform.translation.tolist(),
        vertebra_ids=ids,
    )
    logger.info(f"Rigid fit ({mode}) on {len(a)} points: RMS {rms:.4f} mm, collinear={collinear}")
    return transform, report


def apply_rigid(volume: AnyVolume, transform: RigidTransform, target_grid: Optional[Geometry] = None) -> AnyVolume:
    """Resample `volume` moved by `transform` onto `target_grid` (trilinear for scalars, nearest for labels)."""
    if not isinstance(transform, RigidTransform):
        raise RegistrationError(f"Expected a RigidTransform, got {type(transform).__name__}", "invalid-transform")
    return warp_rigid(volume, transform, target_grid)


def read_landmarks(path: Union[str, Path]) -> LandmarkSet:
    """Lines of `vertebra_id x y z [sx sy sz]` in world mm; `#` starts a comment."""
    path = Path(path)
    entries = []
    for number, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) not in (4, 7):
            raise RegistrationError(f"{path}:{number}: expected 4 or 7 fields, got {len(fields)}", "landmark-format")
        try:
            vertebra_id = int(fields[0])
            values = [float(v) for v in fields[1:]]
        except ValueError as e:
            raise RegistrationError(f"{path}:{number}: {e}", "landmark-format") from e
        spinous = values[3:] if len(values) == 6 else None
        entries.append(Landmark(vertebra_id, values[:3], spinous))
    return LandmarkSet(tuple(entries))


def write_landmarks(landmarks: LandmarkSet, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for entry in landmarks:
        points = list(entry.body) + (list(entry.spinous) if entry.spinous is not None else [])
        lines.append(" ".join([str(entry.vertebra_id)] + [f"{v:.6f}" for v in points]))
    path.write_text("\n".join(lines) + "\n")
    logger.info(f"Wrote {len(lines)} landmarks to {path}")
