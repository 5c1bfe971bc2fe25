import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from enmloc.se2 import (
    EmptyScanError,
    LidarScan,
    Pose2,
    Ray,
    angle_wrap,
    pose_apply,
    pose_between,
    pose_compose,
    pose_inverse,
    scan_endpoints,
)

angles = st.floats(-50.0, 50.0, allow_nan=False)


def random_pose(rng):
    return Pose2(*rng.uniform(-5, 5, 2), rng.uniform(-math.pi, math.pi))


class TestAngleWrap:
    def test_identity(self):
        assert angle_wrap(0.0) == 0.0

    def test_boundary_canonicalized_to_minus_pi(self):
        assert angle_wrap(3 * math.pi) == pytest.approx(-math.pi)
        assert angle_wrap(math.pi) == pytest.approx(-math.pi)

    def test_in_range_unchanged(self):
        assert angle_wrap(-math.pi / 2) == -math.pi / 2

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            angle_wrap(float("nan"))
        with pytest.raises(ValueError):
            angle_wrap(float("inf"))

    @given(angles)
    def test_congruent_mod_2pi_and_in_range(self, theta):
        w = angle_wrap(theta)
        assert -math.pi <= w < math.pi + 1e-12
        assert math.isclose(math.sin(w), math.sin(theta), abs_tol=1e-9)
        assert math.isclose(math.cos(w), math.cos(theta), abs_tol=1e-9)


class TestPoseOps:
    def test_compose_identity(self):
        b = Pose2(1, 2, 0.3)
        out = pose_compose(Pose2(), b)
        assert (out.x, out.y, out.theta) == (1, 2, 0.3)

    def test_compose_quarter_turn(self):
        out = pose_compose(Pose2(0, 0, math.pi / 2), Pose2(1, 0, 0))
        assert out.x == pytest.approx(0.0, abs=1e-15)
        assert out.y == pytest.approx(1.0)
        assert out.theta == pytest.approx(math.pi / 2)

    def test_compose_inverse_is_identity(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            a = random_pose(rng)
            out = pose_compose(a, pose_inverse(a))
            assert abs(out.x) < 1e-12 and abs(out.y) < 1e-12 and abs(out.theta) < 1e-12

    def test_compose_associative(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            a, b, c = (random_pose(rng) for _ in range(3))
            lhs = pose_compose(pose_compose(a, b), c)
            rhs = pose_compose(a, pose_compose(b, c))
            assert np.allclose(lhs.as_array()[:2], rhs.as_array()[:2], atol=1e-12)
            assert abs(angle_wrap(lhs.theta - rhs.theta)) < 1e-12

    def test_between_roundtrip(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            a, b = random_pose(rng), random_pose(rng)
            r = pose_between(a, b)
            back = pose_compose(a, r)
            assert np.allclose(back.as_array()[:2], b.as_array()[:2], atol=1e-12)
            assert abs(angle_wrap(back.theta - b.theta)) < 1e-12

    def test_between_trivial_cases(self):
        a = Pose2(1, 2, 0.5)
        r = pose_between(a, a)
        assert abs(r.x) < 1e-15 and abs(r.y) < 1e-15 and abs(r.theta) < 1e-15
        b = Pose2(3, -1, 1.1)
        r = pose_between(Pose2(), b)
        assert (r.x, r.y, r.theta) == (b.x, b.y, b.theta)


class TestPoseApply:
    def test_identity(self):
        assert np.allclose(pose_apply(Pose2(), [2.5, 0]), [2.5, 0])

    def test_half_turn(self):
        assert np.allclose(pose_apply(Pose2(1, 1, math.pi), [1, 0]), [0, 1], atol=1e-15)

    def test_origin_maps_to_translation(self):
        p = Pose2(3.2, -1.7, 0.9)
        assert np.allclose(pose_apply(p, [0, 0]), [3.2, -1.7])

    def test_isometry(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            pose = random_pose(rng)
            a, b = rng.uniform(-3, 3, 2), rng.uniform(-3, 3, 2)
            d0 = np.linalg.norm(a - b)
            d1 = np.linalg.norm(pose_apply(pose, a) - pose_apply(pose, b))
            assert d1 == pytest.approx(d0, abs=1e-12)


def make_scan(ranges, angle_min=0.0, angle_inc=math.pi / 2, range_max=10.0):
    return LidarScan(0.0, Pose2(), np.asarray(ranges, float), angle_min, angle_inc, range_max)


class TestScanEndpoints:
    def test_identity_pose(self):
        scan = make_scan([2.0])
        pts, dirs = scan_endpoints(scan, Pose2())
        assert np.allclose(pts, [[2, 0]])
        assert np.allclose(dirs, [[1, 0]])

    def test_rotated_pose(self):
        scan = make_scan([1.0])
        pts, dirs = scan_endpoints(scan, Pose2(0, 0, math.pi / 2))
        assert np.allclose(pts, [[0, 1]], atol=1e-15)
        assert np.allclose(dirs, [[0, 1]], atol=1e-15)

    def test_invalid_rays_excluded(self):
        scan = make_scan([1.0, -1.0, 2.0])
        pts, _ = scan_endpoints(scan, Pose2())
        assert len(pts) == 2

    def test_empty_scan_raises(self):
        scan = make_scan([-1.0, -1.0])
        with pytest.raises(EmptyScanError):
            scan_endpoints(scan, Pose2())

    def test_ray_objects(self):
        scan = make_scan([1.0, 2.0])
        rays = scan.rays
        assert all(isinstance(r, Ray) for r in rays)
        assert np.allclose(rays[1].dir_array, [0, 1], atol=1e-15)
        assert all(abs(np.linalg.norm(r.dir_array) - 1) < 1e-9 for r in rays)
