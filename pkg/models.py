import enum
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from errors import GeometryError, IntensitySpaceError, RegistrationError

ORTHO_TOLERANCE = 1e-9
RANGE_TOLERANCE = 1e-6


class IntensitySpace(enum.Enum):
    HU = "HU"
    MR_RAW = "MR-raw"
    NORMALIZED = "normalized"


class Subregion(enum.Enum):
    BODY = 1
    POSTERIOR = 2


def _as_vector(values, name: str) -> np.ndarray:
    vector = np.asarray(values, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(vector)):
        raise GeometryError(f"{name} must be finite, got {vector}")
    return vector


def orthonormalize(matrix: np.ndarray) -> np.ndarray:
    """Closest orthonormal matrix (polar decomposition), used on float32 headers."""
    u, _, vt = np.linalg.svd(np.asarray(matrix, dtype=np.float64))
    return u @ vt


@dataclass(frozen=True, eq=False)
class Geometry:
    """Voxel grid placed in world space: world = origin + orientation @ (spacing * index)."""

    shape: Tuple[int, int, int]
    spacing: np.ndarray
    origin: np.ndarray
    orientation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        shape = tuple(int(n) for n in self.shape)
        if len(shape) != 3 or min(shape) < 1:
            raise GeometryError(f"Grid shape must be three positive counts, got {shape}")
        spacing = _as_vector(self.spacing, "spacing")
        if np.any(spacing <= 0):
            raise GeometryError(f"Spacing must be positive on every axis, got {spacing}")
        orientation = np.asarray(self.orientation, dtype=np.float64).reshape(3, 3)
        error = np.abs(orientation.T @ orientation - np.eye(3)).max()
        if error >= ORTHO_TOLERANCE:
            raise GeometryError(f"Orientation is not orthonormal (error {error:.3g})")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", _as_vector(self.origin, "origin"))
        object.__setattr__(self, "orientation", orientation)

    @classmethod
    def from_affine(cls, shape, affine: np.ndarray) -> "Geometry":
        affine = np.asarray(affine, dtype=np.float64)
        linear = affine[:3, :3]
        spacing = np.linalg.norm(linear, axis=0)
        if np.any(spacing <= 0) or abs(np.linalg.det(linear)) == 0:
            raise GeometryError("Affine has a singular 3x3 part")
        return cls(
            shape=tuple(shape),
            spacing=spacing,
            origin=affine[:3, 3],
            orientation=orthonormalize(linear / spacing),
        )

    @property
    def affine(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.orientation * self.spacing
        out[:3, 3] = self.origin
        return out

    def index_to_world(self, index: np.ndarray) -> np.ndarray:
        index = np.asarray(index, dtype=np.float64)
        return (index * self.spacing) @ self.orientation.T + self.origin

    def world_to_index(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return ((points - self.origin) @ self.orientation) / self.spacing

    def matches(self, other: "Geometry", tol: float = 1e-6) -> bool:
        return (
            self.shape == other.shape
            and np.allclose(self.spacing, other.spacing, atol=tol)
            and np.allclose(self.origin, other.origin, atol=tol)
            and np.allclose(self.orientation, other.orientation, atol=tol)
        )


class _GridMixin:
    @property
    def geometry(self) -> Geometry:
        return Geometry(self.data.shape, self.spacing, self.origin, self.orientation)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def affine(self) -> np.ndarray:
        return self.geometry.affine

    def _check_grid(self):
        if np.ndim(self.data) != 3:
            raise GeometryError(f"Volumes are 3D, got an array of shape {np.shape(self.data)}")
        geometry = Geometry(np.shape(self.data), self.spacing, self.origin, self.orientation)
        object.__setattr__(self, "spacing", geometry.spacing)
        object.__setattr__(self, "origin", geometry.origin)
        object.__setattr__(self, "orientation", geometry.orientation)


@dataclass(frozen=True, eq=False)
class Volume(_GridMixin):
    data: np.ndarray
    spacing: np.ndarray
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    orientation: np.ndarray = field(default_factory=lambda: np.eye(3))
    intensity_space: IntensitySpace = IntensitySpace.NORMALIZED

    def __post_init__(self):
        object.__setattr__(self, "data", np.asarray(self.data))
        self._check_grid()
        if self.intensity_space is IntensitySpace.NORMALIZED and self.data.size:
            low, high = float(np.min(self.data)), float(np.max(self.data))
            if low < -1 - RANGE_TOLERANCE or high > 1 + RANGE_TOLERANCE:
                raise IntensitySpaceError(
                    f"Normalized volume has values outside [-1, 1]: [{low:.4f}, {high:.4f}]"
                )

    @classmethod
    def on_grid(cls, data, geometry: Geometry, intensity_space: IntensitySpace) -> "Volume":
        return cls(data, geometry.spacing, geometry.origin, geometry.orientation, intensity_space)

    def with_data(self, data, intensity_space: Optional[IntensitySpace] = None) -> "Volume":
        return replace(self, data=data, intensity_space=intensity_space or self.intensity_space)


@dataclass(frozen=True, eq=False)
class LabelVolume(_GridMixin):
    data: np.ndarray
    spacing: np.ndarray
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    orientation: np.ndarray = field(default_factory=lambda: np.eye(3))
    label_meaning: Dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        data = np.asarray(self.data)
        if not np.issubdtype(data.dtype, np.integer):
            raise GeometryError(f"Label volumes hold integers, got dtype {data.dtype}")
        if data.size and data.min() < 0:
            raise GeometryError("Labels must be nonnegative")
        object.__setattr__(self, "data", data)
        self._check_grid()

    @classmethod
    def on_grid(cls, data, geometry: Geometry, label_meaning: Optional[Dict[int, str]] = None) -> "LabelVolume":
        return cls(data, geometry.spacing, geometry.origin, geometry.orientation, dict(label_meaning or {}))

    def with_data(self, data) -> "LabelVolume":
        return replace(self, data=data)

    @property
    def labels(self) -> List[int]:
        values = np.unique(self.data)
        return [int(v) for v in values if v != 0]


@dataclass(frozen=True)
class Landmark:
    vertebra_id: int
    body: np.ndarray
    spinous: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "body", _as_vector(self.body, "body landmark"))
        if self.spinous is not None:
            object.__setattr__(self, "spinous", _as_vector(self.spinous, "spinous landmark"))


@dataclass(frozen=True)
class LandmarkSet:
    entries: Tuple[Landmark, ...] = ()

    def __post_init__(self):
        entries = tuple(sorted(self.entries, key=lambda e: e.vertebra_id))
        ids = [e.vertebra_id for e in entries]
        if len(ids) != len(set(ids)):
            raise RegistrationError(f"Duplicate vertebra ids in landmark set: {ids}", "duplicate-landmark")
        object.__setattr__(self, "entries", entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def ids(self) -> List[int]:
        return [e.vertebra_id for e in self.entries]

    def get(self, vertebra_id: int) -> Optional[Landmark]:
        for entry in self.entries:
            if entry.vertebra_id == vertebra_id:
                return entry
        return None


@dataclass(frozen=True)
class RigidTransform:
    """Maps world points p to rotation @ p + translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        ortho_error = np.abs(rotation.T @ rotation - np.eye(3)).max()
        if ortho_error >= ORTHO_TOLERANCE or abs(np.linalg.det(rotation) - 1.0) >= ORTHO_TOLERANCE:
            raise RegistrationError(
                f"Rotation is not a proper orthonormal matrix (error {ortho_error:.3g})",
                "invalid-transform",
            )
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", _as_vector(self.translation, "translation"))

    @classmethod
    def about_axis(cls, axis, degrees: float, center=(0.0, 0.0, 0.0), translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        """Rotation by `degrees` about `axis` through `center`, followed by a translation."""
        axis = np.asarray(axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        theta = np.deg2rad(degrees)
        k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
        rotation = np.eye(3) + np.sin(theta) * k + (1 - np.cos(theta)) * (k @ k)
        rotation = orthonormalize(rotation)
        center = np.asarray(center, dtype=np.float64)
        return cls(rotation, center - rotation @ center + np.asarray(translation, dtype=np.float64))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        rotation = self.rotation.T
        return RigidTransform(rotation, -rotation @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other."""
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    @property
    def angle_rad(self) -> float:
        cos_angle = (np.trace(self.rotation) - 1.0) / 2.0
        return float(np.arccos(np.clip(cos_angle, -1.0, 1.0)))

    @property
    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out
