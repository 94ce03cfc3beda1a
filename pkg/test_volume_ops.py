import numpy as np
import pytest

from errors import GeometryError, IntensitySpaceError
from models import Geometry, IntensitySpace, LabelVolume, RigidTransform, Volume
from volume_ops import (
    coordinate_ramps,
    crop_window_2d,
    denormalize_ct,
    feather_weights,
    normalize_ct,
    normalize_mr,
    pad_2d,
    pad_to_multiple,
    patch_3d,
    random_crop_2d,
    resample,
    slice_sagittal,
    stitch_2d,
    stitch_3d,
    tile_windows_2d,
    unpad,
    warp_rigid,
    window_starts,
)


def _grid(shape, spacing=(1.0, 1.0, 1.0)):
    return Geometry(shape, spacing, (0.0, 0.0, 0.0))


def test_normalize_ct_clips_and_round_trips_inside_range():
    hu = Volume.on_grid(np.array([-3000.0, -1000.0, 0.0, 250.0, 1000.0, 2500.0]).reshape(6, 1, 1), _grid((6, 1, 1)), IntensitySpace.HU)

    normalized = normalize_ct(hu)

    np.testing.assert_allclose(normalized.data.ravel(), [-1.0, -1.0, 0.0, 0.25, 1.0, 1.0])
    np.testing.assert_allclose(denormalize_ct(normalized).data.ravel()[1:5], [-1000.0, 0.0, 250.0, 1000.0])


def test_normalize_ct_rejects_other_spaces():
    volume = Volume.on_grid(np.zeros((2, 2, 2)), _grid((2, 2, 2)), IntensitySpace.NORMALIZED)
    with pytest.raises(IntensitySpaceError):
        normalize_ct(volume)


def test_normalize_mr_maps_zero_and_peak():
    mr = Volume.on_grid(np.array([0.0, 50.0, 200.0]).reshape(3, 1, 1), _grid((3, 1, 1)), IntensitySpace.MR_RAW)

    np.testing.assert_allclose(normalize_mr(mr).data.ravel(), [-1.0, -0.5, 1.0])


def test_normalize_mr_rejects_all_zero():
    mr = Volume.on_grid(np.zeros((2, 2, 2)), _grid((2, 2, 2)), IntensitySpace.MR_RAW)
    with pytest.raises(IntensitySpaceError) as excinfo:
        normalize_mr(mr)
    assert excinfo.value.kind == "all-zero-volume"


def test_resample_to_same_spacing_is_identity():
    data = np.random.default_rng(0).random((5, 6, 7))
    volume = Volume.on_grid(data, _grid((5, 6, 7), (1.0, 2.0, 0.5)), IntensitySpace.MR_RAW)

    out = resample(volume, (1.0, 2.0, 0.5))

    np.testing.assert_array_equal(out.data, data)


def test_resample_halving_spacing_is_trilinear():
    data = np.arange(3, dtype=np.float64).reshape(3, 1, 1) * np.ones((3, 2, 2))
    volume = Volume.on_grid(data, _grid((3, 2, 2), (2.0, 1.0, 1.0)), IntensitySpace.MR_RAW)

    out = resample(volume, (1.0, 1.0, 1.0))

    assert out.shape == (5, 2, 2)
    np.testing.assert_allclose(out.data[:, 0, 0], [0.0, 0.5, 1.0, 1.5, 2.0])


def test_resample_labels_stay_in_input_label_set():
    data = np.zeros((6, 6, 6), dtype=np.int16)
    data[1:4, 1:4, 1:4] = 3
    data[4:, 4:, 4:] = 7
    labels = LabelVolume.on_grid(data, _grid((6, 6, 6), (1.5, 1.5, 1.5)))

    out = resample(labels, (1.0, 1.0, 1.0))

    assert set(np.unique(out.data)) <= {0, 3, 7}
    assert out.data.dtype == np.int16


def test_resample_rejects_degenerate_spacing():
    volume = Volume.on_grid(np.zeros((2, 2, 2)), _grid((2, 2, 2)), IntensitySpace.MR_RAW)
    with pytest.raises(GeometryError) as excinfo:
        resample(volume, (1.0, 0.0, 1.0))
    assert excinfo.value.kind == "degenerate-spacing"


def test_slice_sagittal_keeps_only_labelled_slices():
    labels = np.zeros((4, 3, 3), dtype=np.int16)
    labels[1, 1, 1] = 1
    labels[3, 0, 0] = 2
    geometry = _grid((4, 3, 3))
    image = Volume.on_grid(np.random.default_rng(1).random((4, 3, 3)), geometry, IntensitySpace.MR_RAW)

    slices = slice_sagittal(image, LabelVolume.on_grid(labels, geometry))

    assert [s.index for s in slices] == [1, 3]
    np.testing.assert_array_equal(slices[0].image, image.data[1])


def test_random_crop_pads_small_images_with_the_pad_value():
    image = np.ones((100, 80))

    crop = random_crop_2d(image, (256, 256), np.random.default_rng(0), pad_value=-1.0)

    assert crop.shape == (256, 256)
    np.testing.assert_array_equal(crop[:100, :80], 1.0)
    assert np.all(crop[100:, :] == -1.0)


def test_crop_window_stays_inside_the_image():
    rng = np.random.default_rng(3)
    for _ in range(50):
        window = crop_window_2d((300, 270), (256, 256), rng)
        assert 0 <= window[0].start and window[0].stop <= 300
        assert 0 <= window[1].start and window[1].stop <= 270


def test_pad_to_multiple_and_unpad_restore_the_original():
    data = np.random.default_rng(2).random((13, 9, 16))
    volume = Volume.on_grid(data, _grid((13, 9, 16)), IntensitySpace.MR_RAW)

    padded, record = pad_to_multiple(volume, 8)

    assert padded.shape == (16, 16, 16)
    np.testing.assert_array_equal(padded.data[:13, :9, :16], data)
    np.testing.assert_array_equal(padded.origin, volume.origin)
    np.testing.assert_array_equal(unpad(padded, record).data, data)


def test_coordinate_ramps_span_zero_to_one_over_the_full_volume():
    full = (32, 128, 128)
    first = coordinate_ramps(full, (slice(0, 32), slice(0, 128), slice(0, 128)))

    assert first.shape == (3, 32, 128, 128)
    assert first[0, 0, 0, 0] == 0.0 and first[0, -1, 0, 0] == 1.0
    assert first[1, 0, -1, 0] == 1.0 and first[2, 0, 0, -1] == 1.0

    inner = coordinate_ramps((64, 64, 64), (slice(16, 48), slice(0, 32), slice(32, 64)))
    np.testing.assert_allclose(inner[0, :, 0, 0], np.arange(16, 48) / 63.0)
    assert inner[2, 0, 0, -1] == 1.0


def test_coordinate_ramps_reject_windows_outside_the_volume():
    with pytest.raises(GeometryError) as excinfo:
        coordinate_ramps((8, 8, 8), (slice(0, 8), slice(4, 12), slice(0, 8)))
    assert excinfo.value.kind == "window-out-of-bounds"


def test_feather_weights_peak_in_the_middle():
    weights = feather_weights((5, 4))

    assert weights[2, 1] == weights.max()
    assert weights[0, 0] == weights.min() > 0


def test_window_starts_cover_the_extent():
    assert window_starts(10, 4, 3) == [0, 3, 6]
    assert window_starts(11, 4, 3) == [0, 3, 6, 7]
    with pytest.raises(GeometryError) as excinfo:
        window_starts(3, 4, 2)
    assert excinfo.value.kind == "patch-too-large"


def test_stitching_identical_tiles_reproduces_the_image():
    image = np.random.default_rng(4).random((300, 270))
    windows = tile_windows_2d(image.shape, (256, 256), (192, 192))

    stitched = stitch_2d([(image[w], w) for w in windows], image.shape)

    np.testing.assert_allclose(stitched, image, atol=1e-12)


def test_stitch_3d_of_constant_patches_is_constant():
    volume = Volume.on_grid(np.full((40, 130, 140), 0.25), _grid((40, 130, 140)), IntensitySpace.NORMALIZED)

    patches = patch_3d(volume, (32, 128, 128), (24, 96, 96))
    stitched = stitch_3d([(p.data, w) for p, w in patches], volume.shape)

    assert len(patches) == 2 * 2 * 2
    np.testing.assert_allclose(stitched, 0.25)


def test_patch_origins_follow_the_window():
    volume = Volume.on_grid(np.zeros((40, 130, 140)), _grid((40, 130, 140), (2.0, 1.0, 1.0)), IntensitySpace.MR_RAW)

    patch, window = patch_3d(volume, (32, 128, 128))[-1]

    np.testing.assert_allclose(patch.origin, [window[0].start * 2.0, window[1].start, window[2].start])


def test_pad_2d_keeps_original_indices():
    image = np.arange(6.0).reshape(2, 3)
    padded = pad_2d(image, (4, 4), -1.0)

    np.testing.assert_array_equal(padded[:2, :3], image)
    assert padded[3, 3] == -1.0


def test_warp_by_integer_translation_shifts_the_array():
    data = np.zeros((10, 10, 10))
    data[2:4, 3:5, 4:6] = 1.0
    volume = Volume.on_grid(data, _grid((10, 10, 10)), IntensitySpace.MR_RAW)

    moved = warp_rigid(volume, RigidTransform(translation=(3.0, 0.0, -1.0)))

    np.testing.assert_allclose(moved.data[5:7, 3:5, 3:5], 1.0)
    assert moved.data.sum() == pytest.approx(data.sum())
