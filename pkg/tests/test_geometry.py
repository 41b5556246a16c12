import math

import numpy as np
import pytest

from esvo.geometry import (
    CameraModel,
    MotionParams,
    SE3,
    StereoRig,
    TrajectoryDB,
    back_project,
    cayley_from_se3,
    interpolate_pose,
    load_calibration,
    project,
    projection_jacobian,
    save_calibration,
    se3_from_cayley,
)


def rot_x(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1.0, 0, 0], [0, c, -s], [0, s, c]])


def rot_z(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])


@pytest.fixture
def cam():
    return CameraModel(fx=200.0, fy=200.0, cx=173.0, cy=130.0, width=346, height=260)


class TestCameraModel:
    def test_invariants(self):
        with pytest.raises(ValueError):
            CameraModel(fx=-1.0, fy=200.0, cx=100.0, cy=100.0, width=346, height=260)
        with pytest.raises(ValueError):
            CameraModel(fx=200.0, fy=200.0, cx=400.0, cy=100.0, width=346, height=260)


class TestSE3:
    def test_rejects_non_orthonormal(self):
        with pytest.raises(ValueError):
            SE3(np.eye(3) * 1.01, np.zeros(3))

    def test_rejects_reflection(self):
        with pytest.raises(ValueError):
            SE3(np.diag([1.0, 1.0, -1.0]), np.zeros(3))

    def test_compose_inverse_identity(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            T = se3_from_cayley(MotionParams(rng.normal(size=3) * 0.5, rng.normal(size=3)))
            I = T @ T.inverse()
            assert np.abs(I.R - np.eye(3)).max() < 1e-12
            assert np.abs(I.t).max() < 1e-12

    def test_associativity(self):
        rng = np.random.default_rng(1)
        mk = lambda: se3_from_cayley(MotionParams(rng.normal(size=3) * 0.3, rng.normal(size=3)))
        A, B, C = mk(), mk(), mk()
        left = (A @ B) @ C
        right = A @ (B @ C)
        assert np.abs(left.matrix() - right.matrix()).max() < 1e-12


class TestCayley:
    def test_zero_is_identity(self):
        T = se3_from_cayley(MotionParams.zero())
        assert np.allclose(T.R, np.eye(3))
        assert np.allclose(T.t, 0.0)

    def test_unit_x_is_90_degrees(self):
        # Closed-form Cayley: angle = 2*atan(|c|) = 90 deg about x.
        T = se3_from_cayley(MotionParams(np.array([1.0, 0, 0]), np.zeros(3)))
        assert np.abs(T.R - rot_x(math.pi / 2)).max() < 1e-12
        assert np.allclose(T.t, 0.0)

    def test_pure_translation(self):
        T = se3_from_cayley(MotionParams(np.zeros(3), np.array([1.0, 2.0, 3.0])))
        assert np.allclose(T.apply(np.zeros(3)), [1.0, 2.0, 3.0])

    def test_inverse_map_identity(self):
        theta = cayley_from_se3(SE3.identity())
        assert np.abs(theta.as_vector()).max() == 0.0

    def test_inverse_map_90_x(self):
        theta = cayley_from_se3(SE3(rot_x(math.pi / 2), np.zeros(3)))
        assert np.allclose(theta.c, [1.0, 0.0, 0.0], atol=1e-12)

    def test_round_trip_random(self):
        rng = np.random.default_rng(7)
        worst = 0.0
        for _ in range(100):
            theta = MotionParams(rng.normal(size=3) * 0.4, rng.normal(size=3))
            T = se3_from_cayley(theta)
            back = se3_from_cayley(cayley_from_se3(T))
            worst = max(worst, np.abs(back.matrix() - T.matrix()).max())
        assert worst < 1e-9

    def test_round_trip_large_angles(self):
        # Stable up to 175 degrees.
        rng = np.random.default_rng(8)
        for _ in range(20):
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            angle = math.radians(175.0 * rng.uniform(0.9, 1.0))
            c = math.tan(angle / 2) * axis
            T = se3_from_cayley(MotionParams(c, np.zeros(3)))
            back = se3_from_cayley(cayley_from_se3(T))
            assert np.abs(back.matrix() - T.matrix()).max() < 1e-9

    def test_singularity(self):
        T = SE3(rot_z(math.pi), np.zeros(3))
        with pytest.raises(ValueError, match="cayley singularity"):
            cayley_from_se3(T)


class TestProjection:
    def test_principal_ray(self, cam):
        for z in (0.1, 1.0, 25.0):
            assert np.allclose(project(cam, np.array([0.0, 0.0, z])), [cam.cx, cam.cy])

    def test_pinhole_formula(self, cam):
        assert np.allclose(project(cam, np.array([0.5, 0.0, 2.0])), [223.0, 130.0])

    def test_behind_camera(self, cam):
        with pytest.raises(ValueError, match="behind camera"):
            project(cam, np.array([0.0, 0.0, 0.0]))

    def test_back_project_principal(self, cam):
        P = back_project(cam, np.array([cam.cx, cam.cy]), 0.5)
        assert np.allclose(P, [0.0, 0.0, 2.0])

    def test_back_project_rejects_nonpositive(self, cam):
        with pytest.raises(ValueError, match="non-positive inverse depth"):
            back_project(cam, np.array([10.0, 10.0]), 0.0)

    def test_round_trip(self, cam):
        rng = np.random.default_rng(3)
        px = rng.uniform([0, 0], [cam.width - 1, cam.height - 1], size=(1000, 2))
        rho = rng.uniform(0.05, 5.0, size=1000)
        again = project(cam, back_project(cam, px, rho))
        assert np.abs(again - px).max() < 1e-9

    def test_projection_jacobian_matches_fd(self, cam):
        rng = np.random.default_rng(4)
        for _ in range(20):
            P = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0.5, 4.0)])
            J = projection_jacobian(cam, P)
            eps = 1e-7
            for k in range(3):
                d = np.zeros(3)
                d[k] = eps
                fd = (project(cam, P + d) - project(cam, P - d)) / (2 * eps)
                assert np.abs(J[:, k] - fd).max() < 1e-4


class TestTrajectory:
    def test_empty_raises(self):
        with pytest.raises(ValueError, match="no poses"):
            TrajectoryDB().interpolate(0.0)

    def test_monotonic_enforced(self):
        traj = TrajectoryDB()
        traj.append(1.0, SE3.identity())
        with pytest.raises(ValueError):
            traj.append(1.0, SE3.identity())

    def test_exact_at_knots(self):
        traj = TrajectoryDB()
        poses = [SE3.identity(), SE3(rot_z(0.3), [1.0, 0, 0]), SE3(rot_z(0.8), [2.0, 1, 0])]
        for i, p in enumerate(poses):
            traj.append(float(i), p)
        for i, p in enumerate(poses):
            q = interpolate_pose(traj, float(i))
            assert np.abs(q.matrix() - p.matrix()).max() < 1e-12

    def test_translation_midpoint(self):
        traj = TrajectoryDB()
        traj.append(0.0, SE3.identity())
        traj.append(1.0, SE3(np.eye(3), [2.0, 0.0, 0.0]))
        mid = interpolate_pose(traj, 0.5)
        assert np.allclose(mid.t, [1.0, 0.0, 0.0])
        assert np.allclose(mid.R, np.eye(3))

    def test_slerp_midpoint(self):
        traj = TrajectoryDB()
        traj.append(0.0, SE3.identity())
        traj.append(1.0, SE3(rot_z(math.pi / 2), np.zeros(3)))
        mid = interpolate_pose(traj, 0.5)
        assert np.abs(mid.R - rot_z(math.pi / 4)).max() < 1e-9

    def test_clamps_outside_span(self):
        traj = TrajectoryDB()
        traj.append(0.0, SE3.identity())
        traj.append(1.0, SE3(np.eye(3), [1.0, 0.0, 0.0]))
        assert np.allclose(interpolate_pose(traj, -5.0).t, [0.0, 0.0, 0.0])
        assert np.allclose(interpolate_pose(traj, 9.0).t, [1.0, 0.0, 0.0])

    def test_continuity(self):
        traj = TrajectoryDB()
        traj.append(0.0, SE3.identity())
        traj.append(0.5, SE3(rot_z(0.4), [1.0, 2.0, 0.5]))
        traj.append(1.0, SE3(rot_x(0.9), [0.0, 1.0, 2.0]))
        for t in np.linspace(0.01, 0.99, 23):
            a = interpolate_pose(traj, t)
            b = interpolate_pose(traj, t + 1e-9)
            assert np.abs(a.matrix() - b.matrix()).max() < 1e-6

    def test_single_knot(self):
        traj = TrajectoryDB()
        traj.append(0.0, SE3(rot_z(0.2), [1.0, 0, 0]))
        assert np.allclose(interpolate_pose(traj, 12.0).t, [1.0, 0, 0])


class TestCalibrationFile:
    def test_round_trip(self, cam, tmp_path):
        rig = StereoRig(cam, cam, SE3(np.eye(3), [-0.1, 0.0, 0.0]))
        path = tmp_path / "calib.txt"
        save_calibration(rig, path)
        rig2 = load_calibration(path)
        assert rig2.left == rig.left
        assert rig2.right == rig.right
        assert rig2.baseline == rig.baseline
        rig2.check_rectified()

    def test_missing_key_rejected(self, tmp_path):
        path = tmp_path / "calib.txt"
        path.write_text("fx_l=200.0\n")
        with pytest.raises(ValueError, match="missing"):
            load_calibration(path)

    def test_unknown_key_rejected(self, cam, tmp_path):
        rig = StereoRig(cam, cam, SE3(np.eye(3), [-0.1, 0.0, 0.0]))
        path = tmp_path / "calib.txt"
        save_calibration(rig, path)
        path.write_text(path.read_text() + "bogus=1\n")
        with pytest.raises(ValueError, match="unknown"):
            load_calibration(path)
