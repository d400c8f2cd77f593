import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from fieldfuse.errors import AngleAtCutoff, DegenerateConfiguration
from fieldfuse.geometry import (
    Pose,
    Twist,
    consistency_residual,
    exp_map,
    log_map,
    pose_error,
    random_twist,
)
from fieldfuse.bundle_adjust import gauge_align


def test_exp_map_zero_is_identity():
    p = exp_map(Twist())
    assert np.allclose(p.rotation, np.eye(3), atol=1e-15)
    assert np.allclose(p.translation, 0.0, atol=1e-15)


def test_exp_map_pure_translation():
    p = exp_map(Twist([0, 0, 0], [1, 2, 3]))
    assert np.allclose(p.rotation, np.eye(3), atol=1e-15)
    assert np.allclose(p.translation, [1, 2, 3], atol=1e-15)


def test_exp_map_quarter_turn_matches_rodrigues_oracle():
    # independent oracle: scipy's axis-angle rotation
    p = exp_map(Twist([0, 0, math.pi / 2], [0, 0, 0]))
    expected = Rotation.from_rotvec([0, 0, math.pi / 2]).as_matrix()
    assert np.allclose(p.rotation, expected, atol=1e-12)
    assert np.allclose(p.rotation @ np.array([1.0, 0, 0]), [0, 1, 0], atol=1e-12)
    assert np.allclose(p.translation, 0.0, atol=1e-15)


def test_log_map_trivial_cases():
    assert log_map(Pose()).norm() == 0.0
    xi = log_map(Pose(np.eye(3), [1, 2, 3]))
    assert np.allclose(xi.rotation, 0.0, atol=1e-15)
    assert np.allclose(xi.translation, [1, 2, 3], atol=1e-15)


def test_log_map_matches_axis_angle_oracle():
    rot = Rotation.from_rotvec([0, 0, math.pi / 2]).as_matrix()
    xi = log_map(Pose(rot, [0, 0, 0]))
    assert np.allclose(xi.rotation, [0, 0, math.pi / 2], atol=1e-12)
    assert np.allclose(xi.translation, 0.0, atol=1e-12)


def test_log_map_rejects_angle_near_pi():
    rot = Rotation.from_rotvec([math.pi - 1e-8, 0, 0]).as_matrix()
    with pytest.raises(AngleAtCutoff):
        log_map(Pose(rot, [0, 0, 0]))


def test_round_trip_random_twists():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        xi = random_twist(rng, max_angle=math.pi - 0.1, max_translation=10.0)
        back = log_map(exp_map(xi))
        assert np.linalg.norm(back.as_vector() - xi.as_vector()) < 1e-8


def test_exp_log_small_angle_branch():
    xi = Twist([1e-9, -2e-9, 5e-10], [0.5, -0.25, 2.0])
    back = log_map(exp_map(xi))
    assert np.linalg.norm(back.as_vector() - xi.as_vector()) < 1e-15


def test_composition_associative():
    rng = np.random.default_rng(3)
    for _ in range(50):
        a, b, c = (exp_map(random_twist(rng, 2.5, 5.0)) for _ in range(3))
        left = (a @ b) @ c
        right = a @ (b @ c)
        assert np.allclose(left.as_matrix(), right.as_matrix(), atol=1e-12)


def test_compose_inverse_is_identity():
    rng = np.random.default_rng(11)
    for _ in range(100):
        p = exp_map(random_twist(rng, 3.0, 8.0))
        ident = p @ p.inverse()
        assert np.abs(ident.as_matrix() - np.eye(4)).max() < 1e-9


def test_pose_error_examples():
    rng = np.random.default_rng(5)
    p = exp_map(random_twist(rng, 1.0, 4.0))
    e = pose_error(p, p)
    assert e.rotation_deg == pytest.approx(0.0, abs=1e-7)
    assert e.translation == 0.0

    e = pose_error(Pose(np.eye(3), [0, 0, 10]), Pose())
    assert e.rotation_deg == pytest.approx(0.0, abs=1e-7)
    assert e.translation == pytest.approx(10.0)

    # trace-formula oracle: acos((tr R - 1) / 2)
    rot = Rotation.from_rotvec(np.radians([0, 1.0, 0])).as_matrix()
    expected = math.degrees(math.acos((np.trace(rot) - 1) / 2))
    e = pose_error(Pose(rot, [0, 0, 0]), Pose())
    assert e.rotation_deg == pytest.approx(expected, abs=1e-9)
    assert e.rotation_deg == pytest.approx(1.0, abs=1e-9)


def test_pose_error_rotation_symmetric():
    rng = np.random.default_rng(13)
    for _ in range(20):
        a = exp_map(random_twist(rng, 2.0, 3.0))
        b = exp_map(random_twist(rng, 2.0, 3.0))
        assert pose_error(a, b).rotation_deg == pytest.approx(
            pose_error(b, a).rotation_deg, abs=1e-9
        )


def test_consistency_residual_examples():
    rng = np.random.default_rng(2)
    p = exp_map(random_twist(rng, 2.0, 6.0))
    assert consistency_residual(p.inverse(), p) == pytest.approx(0.0, abs=1e-12)
    assert consistency_residual(Pose(), Pose()) == 0.0
    # direct Frobenius-norm evaluation
    assert consistency_residual(Pose(np.eye(3), [1, 0, 0]), Pose()) == pytest.approx(1.0)


def test_renormalized_restores_orthonormality():
    rng = np.random.default_rng(17)
    p = exp_map(random_twist(rng, 2.0, 1.0))
    drifted = Pose(p.rotation + rng.normal(scale=1e-6, size=(3, 3)), p.translation)
    fixed = drifted.renormalized()
    assert np.linalg.norm(fixed.rotation.T @ fixed.rotation - np.eye(3)) < 1e-12
    assert np.linalg.det(fixed.rotation) == pytest.approx(1.0, abs=1e-12)


def test_pose_matrix_round_trip_and_flat():
    rng = np.random.default_rng(23)
    p = exp_map(random_twist(rng, 2.0, 6.0))
    q = Pose.from_matrix(p.as_matrix())
    assert np.allclose(p.as_matrix(), q.as_matrix(), atol=1e-15)
    flat = p.to_flat()
    assert len(flat) == 16
    assert np.allclose(Pose.from_flat(flat).as_matrix(), p.as_matrix(), atol=1e-15)


def test_gauge_align_exact_gauge_recovered():
    rng = np.random.default_rng(31)
    truth = [exp_map(random_twist(rng, 1.5, 8.0)) for _ in range(6)]
    g = exp_map(random_twist(rng, 1.0, 5.0))
    est = [g.inverse() @ t for t in truth]
    g_hat, errors = gauge_align(est, truth)
    assert np.allclose(g_hat.as_matrix(), g.as_matrix(), atol=1e-9)
    for e in errors:
        assert e.translation < 1e-9


def test_gauge_align_identity_for_equal_sets():
    rng = np.random.default_rng(37)
    poses = [exp_map(random_twist(rng, 1.5, 8.0)) for _ in range(5)]
    g_hat, errors = gauge_align(poses, poses)
    assert np.allclose(g_hat.as_matrix(), np.eye(4), atol=1e-9)
    # acos of a float64 trace bottoms out around 1e-5 degrees
    assert all(e.translation < 1e-9 and e.rotation_deg < 1e-4 for e in errors)


def test_gauge_align_two_poses_splits_residual():
    # closed-form Procrustes oracle: only the inter-point distance mismatch
    # remains, split evenly between the two poses
    truth = [Pose(np.eye(3), [0, 0, 0]), Pose(np.eye(3), [2, 0, 0])]
    est = [Pose(np.eye(3), [0, 0, 0]), Pose(np.eye(3), [3, 0, 0])]
    _, errors = gauge_align(est, truth)
    assert errors[0].translation == pytest.approx(0.5, abs=1e-9)
    assert errors[1].translation == pytest.approx(0.5, abs=1e-9)


def test_gauge_align_degenerate_configurations():
    coincident = [Pose(np.eye(3), [1, 1, 1])] * 3
    with pytest.raises(DegenerateConfiguration):
        gauge_align(coincident, coincident)
    collinear = [Pose(np.eye(3), [float(i), 0, 0]) for i in range(4)]
    with pytest.raises(DegenerateConfiguration):
        gauge_align(collinear, collinear)
