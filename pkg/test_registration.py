import numpy as np
import pytest

from config import PhantomConfig
from errors import RegistrationError
from models import Landmark, LandmarkSet, RigidTransform
from phantom import vertebra_layout
from registration import (
    apply_rigid,
    extract_centroids,
    fit_rigid,
    perturb_landmarks,
    read_landmarks,
    write_landmarks,
)


def _layout_landmarks(cfg: PhantomConfig) -> LandmarkSet:
    return LandmarkSet(tuple(Landmark(v.vertebra_id, v.body_center, v.process_center) for v in vertebra_layout(cfg)))


def _moved(landmarks: LandmarkSet, transform: RigidTransform) -> LandmarkSet:
    return LandmarkSet(
        tuple(Landmark(e.vertebra_id, transform.apply(e.body), transform.apply(e.spinous)) for e in landmarks)
    )


def _random_rotation(rng, max_degrees):
    axis = rng.normal(size=3)
    return RigidTransform.about_axis(axis, rng.uniform(-max_degrees, max_degrees)).rotation


def test_two_point_fit_recovers_random_transforms():
    rng = np.random.default_rng(11)
    mr = _layout_landmarks(PhantomConfig(curvature=3.0))
    for _ in range(100):
        truth = RigidTransform(_random_rotation(rng, 30.0), rng.uniform(-50.0, 50.0, 3))
        ct = _moved(mr, truth.inverse())

        transform, report = fit_rigid(ct, mr, "two-point")

        assert transform.compose(truth.inverse()).angle_rad < 1e-6
        np.testing.assert_allclose(transform.translation, truth.translation, atol=1e-6)
        assert report.rms < 1e-6
        assert not report.collinear


def test_one_point_fit_on_a_curved_column_is_exact():
    mr = LandmarkSet(tuple(Landmark(e.vertebra_id, e.body) for e in _layout_landmarks(PhantomConfig(curvature=3.0))))
    truth = RigidTransform.about_axis((0.0, 1.0, 0.0), 10.0, translation=(5.0, -2.0, 1.0))
    ct = LandmarkSet(tuple(Landmark(e.vertebra_id, truth.inverse().apply(e.body)) for e in mr))

    transform, report = fit_rigid(ct, mr, "one-point")

    assert transform.compose(truth.inverse()).angle_rad < 1e-6
    assert report.n_points == 5


def test_rotation_about_a_straight_column_needs_the_spinous_process():
    cfg = PhantomConfig(curvature=0.0)
    mr = _layout_landmarks(cfg)
    column = np.mean([e.body for e in mr], axis=0)
    ct = _moved(mr, RigidTransform.about_axis((0.0, 0.0, 1.0), 15.0, column))

    def spinous_error(transform):
        return max(np.linalg.norm(transform.apply(ct.get(v).spinous) - mr.get(v).spinous) for v in mr.ids)

    one_point, one_report = fit_rigid(ct, mr, "one-point")
    two_point, two_report = fit_rigid(ct, mr, "two-point")

    assert one_report.collinear
    assert spinous_error(one_point) > 5.0
    assert not two_report.collinear
    assert spinous_error(two_point) < 0.1


def test_fit_needs_three_points():
    mr = _layout_landmarks(PhantomConfig(n_vertebrae=2))
    with pytest.raises(RegistrationError) as excinfo:
        fit_rigid(mr, mr, "one-point")
    assert excinfo.value.kind == "too-few-points"


def test_two_point_fit_needs_spinous_landmarks():
    mr = _layout_landmarks(PhantomConfig())
    ct = LandmarkSet(tuple(Landmark(e.vertebra_id, e.body) for e in mr))
    with pytest.raises(RegistrationError) as excinfo:
        fit_rigid(ct, mr, "two-point")
    assert excinfo.value.kind == "missing-spinous"


def test_unknown_fit_mode():
    mr = _layout_landmarks(PhantomConfig())
    with pytest.raises(RegistrationError) as excinfo:
        fit_rigid(mr, mr, "three-point")
    assert excinfo.value.kind == "invalid-mode"


def test_fit_matches_by_vertebra_id():
    mr = _layout_landmarks(PhantomConfig(curvature=3.0))
    truth = RigidTransform(translation=(1.0, 2.0, 3.0))
    # an extra CT vertebra with no MR counterpart is ignored
    ct = LandmarkSet(_moved(mr, truth.inverse()).entries + (Landmark(99, (0.0, 0.0, 0.0), (1.0, 1.0, 1.0)),))

    transform, report = fit_rigid(ct, mr, "two-point")

    assert report.vertebra_ids == mr.ids
    np.testing.assert_allclose(transform.translation, truth.translation, atol=1e-9)


def test_centroids_of_moved_labels_follow_the_transform(small_phantom):
    transform = RigidTransform(translation=(2.0, -1.0, 3.0))
    moved = apply_rigid(small_phantom.labels, transform)

    before = extract_centroids(small_phantom.labels)
    after = extract_centroids(moved)

    for vertebra_id in before.ids:
        np.testing.assert_allclose(after.get(vertebra_id).body, before.get(vertebra_id).body + transform.translation, atol=1e-9)


def test_extract_centroids_rejects_empty_labels(small_phantom):
    empty = small_phantom.labels.with_data(np.zeros_like(small_phantom.labels.data))
    with pytest.raises(RegistrationError) as excinfo:
        extract_centroids(empty)
    assert excinfo.value.kind == "empty-label"


def test_apply_rigid_rejects_non_transforms(small_phantom):
    with pytest.raises(RegistrationError) as excinfo:
        apply_rigid(small_phantom.ct, np.eye(4))
    assert excinfo.value.kind == "invalid-transform"


def test_perturbation_is_seeded_and_bounded():
    landmarks = _layout_landmarks(PhantomConfig())

    first = perturb_landmarks(landmarks, 2.0, np.random.default_rng(5))
    second = perturb_landmarks(landmarks, 2.0, np.random.default_rng(5))

    np.testing.assert_array_equal(first.get(1).body, second.get(1).body)
    assert not np.allclose(first.get(1).body, landmarks.get(1).body)
    assert perturb_landmarks(landmarks, 0.0, np.random.default_rng(5)) is landmarks


def test_landmark_file_round_trip(tmp_path):
    landmarks = LandmarkSet((Landmark(2, (1.5, 2.0, -3.25), (4.0, 5.0, 6.0)), Landmark(1, (0.0, 0.0, 0.0))))

    write_landmarks(landmarks, tmp_path / "lm.txt")
    loaded = read_landmarks(tmp_path / "lm.txt")

    assert loaded.ids == [1, 2]
    assert loaded.get(1).spinous is None
    np.testing.assert_allclose(loaded.get(2).spinous, [4.0, 5.0, 6.0])


def test_landmark_file_with_comments_and_bad_lines(tmp_path):
    (tmp_path / "ok.txt").write_text("# id x y z\n3 1 2 3  # body only\n\n")
    assert read_landmarks(tmp_path / "ok.txt").get(3).spinous is None

    (tmp_path / "bad.txt").write_text("3 1 2\n")
    with pytest.raises(RegistrationError) as excinfo:
        read_landmarks(tmp_path / "bad.txt")
    assert excinfo.value.kind == "landmark-format"
