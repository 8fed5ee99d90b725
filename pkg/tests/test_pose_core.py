import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from posediff.exceptions import CropDomainError, DegenerateRotationError, InvalidRotationError
from posediff.pose_core import (BBox2D, CameraIntrinsics, CropSpec, Pose, decode_batch, dzi_augment, dzi_crop,
                                dzi_inference_crop, matrix_to_rot6d, pose_decode, pose_encode, rot6d_to_matrix,
                                site_decode, site_encode)

K = CameraIntrinsics(600.0, 610.0, 320.0, 240.0)
vec6 = st.lists(st.floats(-10, 10, allow_nan=False), min_size=6, max_size=6)


def random_pose(rng):
    R = Rotation.random(random_state=rng).as_matrix()
    T = np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.2, 0.2), rng.uniform(0.5, 1.5)])
    return Pose(R, T, rng.uniform(0.05, 0.3, 3))


def crop_for(pose, rng=None):
    u, v = K.project(pose.translation)
    box = BBox2D(u + 3.0, v - 2.0, 90.0, 120.0)
    return dzi_inference_crop(box) if rng is None else dzi_augment(box, rng)


def test_rot6d_round_trip_batch():
    R = Rotation.random(1000, random_state=0).as_matrix()
    assert np.abs(rot6d_to_matrix(matrix_to_rot6d(R)) - R).max() < 1e-12


@settings(max_examples=200, deadline=None)
@given(vec6)
def test_gram_schmidt_lands_in_so3(v):
    v = np.array(v)
    a1, a2 = v[:3], v[3:]
    n1, n2 = np.linalg.norm(a1), np.linalg.norm(a2)
    if n1 < 1e-3 or n2 < 1e-3 or np.linalg.norm(np.cross(a1, a2)) < 1e-3 * n1 * n2:
        return
    R = rot6d_to_matrix(v)
    assert np.abs(R.T @ R - np.eye(3)).max() < 1e-9
    assert abs(np.linalg.det(R) - 1) < 1e-9
    # first column keeps the direction of a1
    assert np.allclose(R[:, 0], a1 / n1)


def test_degenerate_rotation_reports_index():
    good = matrix_to_rot6d(np.eye(3))
    batch = np.stack([good, good, np.r_[1.0, 0, 0, 2.0, 0, 0]])
    with pytest.raises(DegenerateRotationError) as info:
        rot6d_to_matrix(batch)
    assert info.value.index == 2
    with pytest.raises(DegenerateRotationError):
        rot6d_to_matrix(np.zeros(6))


def test_matrix_to_rot6d_rejects_non_rotations():
    with pytest.raises(InvalidRotationError):
        matrix_to_rot6d(np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(InvalidRotationError):
        matrix_to_rot6d(np.eye(3) * 1.01)


def test_site_round_trip_and_crop_invariance():
    rng = np.random.default_rng(1)
    for _ in range(200):
        p = random_pose(rng)
        c1, c2 = crop_for(p, rng), crop_for(p, rng)
        for c in (c1, c2):
            s = site_encode(K.project(p.translation), p.translation[2], c)
            assert np.abs(site_decode(s, c, K) - p.translation).max() < 1e-9


def test_site_known_values():
    crop = CropSpec(center_x=300.0, center_y=200.0, box_h=100.0, box_w=50.0, s_zoom=256.0, ratio=2.0)
    assert np.allclose(site_encode((310.0, 180.0), 1.0, crop), [0.2, -0.2, 0.5])


def test_site_zero_box_raises():
    crop = CropSpec(0.0, 0.0, 0.0, 10.0, 256.0, 1.0)
    with pytest.raises(CropDomainError):
        site_encode((1.0, 1.0), 1.0, crop)


def test_pose_encode_decode_round_trip():
    rng = np.random.default_rng(2)
    for _ in range(100):
        p = random_pose(rng)
        c = crop_for(p, rng)
        q = pose_decode(pose_encode(p, c, K), c, K)
        assert np.abs(q.rotation - p.rotation).max() < 1e-9
        assert np.abs(q.translation - p.translation).max() < 1e-9
        assert np.abs(q.size - p.size).max() < 1e-12


def test_encode_of_decode_is_idempotent():
    rng = np.random.default_rng(3)
    p = random_pose(rng)
    c = crop_for(p)
    v = pose_encode(p, c, K) + rng.normal(0, 0.05, 12)
    v[8] = abs(v[8])
    w = pose_encode(pose_decode(v, c, K), c, K)
    assert np.abs(pose_encode(pose_decode(w, c, K), c, K) - w).max() < 1e-12


def test_decode_clamps_nonpositive_depth_and_size():
    p = random_pose(np.random.default_rng(4))
    c = crop_for(p)
    v = pose_encode(p, c, K)
    bad = v.copy()
    bad[8] = -0.1
    bad[9] = 0.0
    poses, clamped = decode_batch(np.stack([v, bad]), c, K)
    assert clamped.tolist() == [False, True]
    assert poses[1].translation[2] > 0 and np.all(poses[1].size > 0)


def test_dzi_augment_ranges_and_determinism():
    box = BBox2D(320.0, 240.0, 80.0, 100.0)
    s_o = 100.0
    for seed in range(200):
        c = dzi_augment(box, seed)
        assert abs(c.center_x - 320.0) <= 0.25 * s_o + 1e-12
        assert abs(c.center_y - 240.0) <= 0.25 * s_o + 1e-12
        scaled = c.box_w / 1.5
        assert 0.75 * s_o - 1e-9 <= scaled <= 1.25 * s_o + 1e-9
        assert np.isclose(c.ratio, 256.0 / scaled)
    assert dzi_augment(box, 7) == dzi_augment(box, 7)


def test_inference_crop_has_no_shift():
    box = BBox2D(100.0, 50.0, 40.0, 30.0)
    c = dzi_inference_crop(box)
    assert (c.center_x, c.center_y, c.box_w, c.ratio) == (100.0, 50.0, 60.0, 256.0 / 40.0)
    assert c == dzi_crop(box)


def test_pose_validation():
    with pytest.raises(InvalidRotationError):
        Pose(np.diag([1.0, -1.0, -1.0]) * 2, np.zeros(3), np.ones(3))
    with pytest.raises(ValueError):
        Pose(np.eye(3), np.zeros(3), np.array([1.0, 0.0, 1.0]))
    with pytest.raises(ValueError):
        BBox2D(0.0, 0.0, 0.0, 1.0)
    p = Pose(np.eye(3), np.ones(3), np.ones(3))
    assert Pose.from_dict(p.to_dict()) == p
