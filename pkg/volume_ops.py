import logging
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from constants import (
    AIR_HU,
    AIR_NORMALIZED,
    CROP_SIZE_2D,
    HU_SCALE,
    PAD_MULTIPLE,
    PATCH_SIZE_3D,
    RESAMPLE_TOLERANCE,
    TILE_STRIDE_2D,
)
from errors import GeometryError, IntensitySpaceError
from models import Geometry, IntensitySpace, LabelVolume, Volume

logger = logging.getLogger(__name__)

# Axis 0 runs left to right (sagittal slice index), axis 1 anterior to posterior, axis 2 caudal to cranial.

Window = Tuple[slice, ...]
AnyVolume = Union[Volume, LabelVolume]


class SagittalSlice(NamedTuple):
    index: int
    image: np.ndarray
    labels: np.ndarray


@dataclass(frozen=True)
class PadRecord:
    original_shape: Tuple[int, ...]
    pad_after: Tuple[int, ...]


def normalize_ct(volume: Volume) -> Volume:
    if volume.intensity_space is not IntensitySpace.HU:
        raise IntensitySpaceError(f"normalize_ct expects HU, got {volume.intensity_space.value}")
    data = np.clip(volume.data.astype(np.float64) / HU_SCALE, -1.0, 1.0)
    return volume.with_data(data, IntensitySpace.NORMALIZED)


def normalize_mr(volume: Volume) -> Volume:
    """Linear map sending 0 to -1 and the volume maximum to +1."""
    data = volume.data.astype(np.float64)
    if data.min() < 0:
        raise IntensitySpaceError(f"MR magnitudes must be nonnegative, found {data.min():.4g}")
    peak = data.max()
    if peak <= 0:
        raise IntensitySpaceError("Cannot normalize an all-zero MR volume", "all-zero-volume")
    data = np.clip(2.0 * data / peak - 1.0, -1.0, 1.0)
    return volume.with_data(data, IntensitySpace.NORMALIZED)


def denormalize_ct(volume: Volume) -> Volume:
    if volume.intensity_space is not IntensitySpace.NORMALIZED:
        raise IntensitySpaceError(f"denormalize_ct expects normalized input, got {volume.intensity_space.value}")
    return volume.with_data(volume.data.astype(np.float64) * HU_SCALE, IntensitySpace.HU)


def fill_value(volume: AnyVolume) -> float:
    if isinstance(volume, LabelVolume):
        return 0
    return {
        IntensitySpace.NORMALIZED: AIR_NORMALIZED,
        IntensitySpace.HU: AIR_HU,
        IntensitySpace.MR_RAW: 0.0,
    }[volume.intensity_space]


def grid_for_spacing(geometry: Geometry, target_spacing: Sequence[float]) -> Geometry:
    """Same origin and orientation, new spacing, extent covered without extrapolation."""
    target_spacing = np.asarray(target_spacing, dtype=np.float64)
    if target_spacing.shape != (3,) or np.any(target_spacing <= 0) or not np.all(np.isfinite(target_spacing)):
        raise GeometryError(f"Degenerate target spacing {target_spacing}", "degenerate-spacing")
    extent = (np.asarray(geometry.shape) - 1) * geometry.spacing
    shape = np.floor(extent / target_spacing + RESAMPLE_TOLERANCE).astype(int) + 1
    return Geometry(tuple(shape), target_spacing, geometry.origin, geometry.orientation)


def sample_world(volume: AnyVolume, points: np.ndarray, order: Optional[int] = None) -> np.ndarray:
    """
    Sample `volume` at world points (..., 3). Scalars are trilinear, labels
    nearest-neighbour; points outside the grid get the volume's fill value.
    """
    points = np.asarray(points, dtype=np.float64)
    index = volume.geometry.world_to_index(points.reshape(-1, 3))
    is_label = isinstance(volume, LabelVolume)
    if order is None:
        order = 0 if is_label else 1
    tolerance = 0.5 if order == 0 else RESAMPLE_TOLERANCE
    upper = np.asarray(volume.shape) - 1
    inside = np.all((index >= -tolerance) & (index <= upper + tolerance), axis=1)
    coords = np.clip(index, 0, upper).T
    if order == 0:
        coords = np.floor(coords + 0.5)
    values = ndimage.map_coordinates(volume.data, coords, order=order, mode="nearest", prefilter=False)
    values = np.where(inside, values, fill_value(volume))
    return values.reshape(points.shape[:-1])


def grid_points(geometry: Geometry) -> np.ndarray:
    index = np.stack(np.meshgrid(*[np.arange(n) for n in geometry.shape], indexing="ij"), axis=-1)
    return geometry.index_to_world(index.reshape(-1, 3)).reshape(geometry.shape + (3,))


def resample(
    volume: AnyVolume,
    target_spacing: Optional[Sequence[float]] = None,
    target_grid: Optional[Geometry] = None,
) -> AnyVolume:
    if target_grid is None:
        if target_spacing is None:
            raise GeometryError("resample needs a target spacing or a target grid", "degenerate-spacing")
        target_grid = grid_for_spacing(volume.geometry, target_spacing)
    if target_grid.matches(volume.geometry, tol=1e-12):
        return volume.with_data(volume.data.copy())
    values = sample_world(volume, grid_points(target_grid))
    if isinstance(volume, LabelVolume):
        return LabelVolume.on_grid(values.astype(volume.data.dtype), target_grid, volume.label_meaning)
    logger.debug(f"Resampled {volume.shape} -> {target_grid.shape} at spacing {target_grid.spacing}")
    return Volume.on_grid(values, target_grid, volume.intensity_space)


def slice_sagittal(volume: Volume, labels: LabelVolume) -> List[SagittalSlice]:
    """One (image, labels) pair per sagittal index with a nonempty label slice."""
    if not volume.geometry.matches(labels.geometry):
        raise GeometryError("Image and labels are not on the same grid")
    nonempty = np.any(labels.data != 0, axis=(1, 2))
    return [
        SagittalSlice(int(i), volume.data[i].copy(), labels.data[i].copy())
        for i in np.flatnonzero(nonempty)
    ]


def crop_window_2d(shape: Tuple[int, int], size: Tuple[int, int], rng: np.random.Generator) -> Window:
    starts = [int(rng.integers(0, max(n - s, 0) + 1)) for n, s in zip(shape, size)]
    return tuple(slice(start, start + s) for start, s in zip(starts, size))


def pad_2d(image: np.ndarray, size: Tuple[int, int], value: float = 0.0) -> np.ndarray:
    """Pads at the high end of each axis so original pixels keep their indices."""
    pad = [(0, max(s - n, 0)) for n, s in zip(image.shape, size)]
    if not any(after for _, after in pad):
        return image
    return np.pad(image, pad, mode="constant", constant_values=value)


def random_crop_2d(
    image: np.ndarray,
    size: Tuple[int, int] = CROP_SIZE_2D,
    rng: Optional[np.random.Generator] = None,
    pad_value: float = 0.0,
) -> np.ndarray:
    rng = rng if rng is not None else np.random.default_rng(0)
    padded = pad_2d(np.asarray(image), size, pad_value)
    return padded[crop_window_2d(padded.shape, size, rng)].copy()


def pad_to_multiple(volume: Volume, m: int = PAD_MULTIPLE) -> Tuple[Volume, PadRecord]:
    """Edge-replicates each axis up to the next multiple of m; the origin stays put."""
    shape = volume.shape
    pad_after = tuple((-n) % m for n in shape)
    record = PadRecord(tuple(shape), pad_after)
    if not any(pad_after):
        return volume, record
    data = np.pad(volume.data, [(0, p) for p in pad_after], mode="edge")
    return volume.with_data(data), record


def unpad(volume: AnyVolume, record: PadRecord) -> AnyVolume:
    window = tuple(slice(0, n) for n in record.original_shape)
    return volume.with_data(volume.data[window].copy())


def _check_window(window: Window, full_dims: Sequence[int]):
    for axis, (part, n) in enumerate(zip(window, full_dims)):
        if part.start is None or part.stop is None or part.start < 0 or part.stop > n or part.start >= part.stop:
            raise GeometryError(f"Window {window} is outside dims {tuple(full_dims)} on axis {axis}", "window-out-of-bounds")


def coordinate_ramps(full_dims: Sequence[int], window: Window) -> np.ndarray:
    """
    Three channels, channel k rising linearly from 0 to 1 across the full
    extent of axis k (i / (N - 1)), cropped to `window`.
    """
    full_dims = tuple(int(n) for n in full_dims)
    _check_window(window, full_dims)
    channels = []
    for axis, (n, part) in enumerate(zip(full_dims, window)):
        values = np.arange(part.start, part.stop, dtype=np.float64)
        values = values / (n - 1) if n > 1 else np.zeros_like(values)
        shape = [1] * len(full_dims)
        shape[axis] = values.size
        channels.append(values.reshape(shape))
    window_shape = tuple(part.stop - part.start for part in window)
    return np.stack([np.broadcast_to(c, window_shape) for c in channels])


def feather_weights(shape: Sequence[int]) -> np.ndarray:
    """Separable tent weights, largest in the middle and falling linearly toward every edge."""
    weights = np.ones(tuple(shape))
    for axis, n in enumerate(shape):
        ramp = np.minimum(np.arange(1, n + 1), np.arange(n, 0, -1)).astype(np.float64)
        view = [1] * len(shape)
        view[axis] = n
        weights = weights * ramp.reshape(view)
    return weights


def stitch(tiles: Sequence[Tuple[np.ndarray, Window]], full_dims: Sequence[int], fill: float = AIR_NORMALIZED) -> np.ndarray:
    full_dims = tuple(int(n) for n in full_dims)
    total = np.zeros(full_dims)
    weight = np.zeros(full_dims)
    for tile, window in tiles:
        _check_window(window, full_dims)
        tile = np.asarray(tile, dtype=np.float64)
        if tile.shape != tuple(part.stop - part.start for part in window):
            raise GeometryError(f"Tile shape {tile.shape} does not match window {window}", "window-out-of-bounds")
        w = feather_weights(tile.shape)
        total[window] += w * tile
        weight[window] += w
    covered = weight > 0
    out = np.full(full_dims, fill, dtype=np.float64)
    out[covered] = total[covered] / weight[covered]
    return out


def stitch_2d(tiles: Sequence[Tuple[np.ndarray, Window]], full_dims: Sequence[int]) -> np.ndarray:
    if len(full_dims) != 2:
        raise GeometryError(f"stitch_2d needs 2D dims, got {full_dims}")
    return stitch(tiles, full_dims)


def stitch_3d(tiles: Sequence[Tuple[np.ndarray, Window]], full_dims: Sequence[int]) -> np.ndarray:
    if len(full_dims) != 3:
        raise GeometryError(f"stitch_3d needs 3D dims, got {full_dims}")
    return stitch(tiles, full_dims)


def window_starts(n: int, size: int, stride: int) -> List[int]:
    """Start offsets covering [0, n) with the last window clamped to the boundary."""
    if size > n:
        raise GeometryError(f"Patch extent {size} is larger than volume extent {n}", "patch-too-large")
    starts = list(range(0, n - size + 1, max(int(stride), 1)))
    if starts[-1] != n - size:
        starts.append(n - size)
    return starts


def tile_windows(shape: Sequence[int], size: Sequence[int], stride: Sequence[int]) -> List[Window]:
    per_axis = [window_starts(n, s, st) for n, s, st in zip(shape, size, stride)]
    grids = np.meshgrid(*[np.asarray(p) for p in per_axis], indexing="ij")
    starts = np.stack([g.ravel() for g in grids], axis=1)
    return [tuple(slice(int(b), int(b) + s) for b, s in zip(row, size)) for row in starts]


def tile_windows_2d(shape: Tuple[int, int], size=CROP_SIZE_2D, stride=TILE_STRIDE_2D) -> List[Window]:
    return tile_windows(shape, size, stride)


def patch_3d(
    volume: Volume,
    patch: Sequence[int] = PATCH_SIZE_3D,
    stride: Optional[Sequence[int]] = None,
) -> List[Tuple[Volume, Window]]:
    stride = tuple(stride) if stride is not None else tuple(patch)
    windows = tile_windows(volume.shape, patch, stride)
    out = []
    for window in windows:
        origin = volume.geometry.index_to_world(np.array([part.start for part in window], dtype=np.float64))
        sub = Volume(volume.data[window].copy(), volume.spacing, origin, volume.orientation, volume.intensity_space)
        out.append((sub, window))
    logger.debug(f"Split volume {volume.shape} into {len(out)} patches of {tuple(patch)}")
    return out


def warp_rigid(volume: AnyVolume, transform, target_grid: Optional[Geometry] = None) -> AnyVolume:
    """
    Move `volume` by a rigid world transform: out(p) = volume(T⁻¹(p)),
    sampled on `target_grid` (the volume's own grid by default).
    """
    target_grid = target_grid or volume.geometry
    points = grid_points(target_grid)
    values = sample_world(volume, transform.inverse().apply(points.reshape(-1, 3)).reshape(points.shape))
    if isinstance(volume, LabelVolume):
        return LabelVolume.on_grid(values.astype(volume.data.dtype), target_grid, volume.label_meaning)
    return Volume.on_grid(values, target_grid, volume.intensity_space)
