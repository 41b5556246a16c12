import math

import numpy as np
import pytest

from esvo.geometry import SE3, CameraModel, StereoRig
from esvo.simulator import (
    PlaneSpec,
    SceneConfig,
    SimTrajectory,
    ground_truth_inverse_depth,
    ground_truth_inverse_depth_map,
    render_intensity,
    simulate_events,
    single_plane_scene,
    three_plane_scene,
)


def small_cam():
    return CameraModel(fx=120.0, fy=120.0, cx=79.5, cy=59.5, width=160, height=120)


def small_rig():
    cam = small_cam()
    return StereoRig(cam, cam, SE3(np.eye(3), [-0.1, 0.0, 0.0]))


@pytest.fixture(scope="module")
def cam():
    return small_cam()


@pytest.fixture(scope="module")
def rig():
    return small_rig()


class TestRenderIntensity:
    def test_checkerboard_centered(self, cam):
        pattern = np.array([[True, False], [False, True]])
        scene = SceneConfig(planes=(PlaneSpec(2.0, pattern, (1.0, 1.0)),))
        img = render_intensity(scene, SE3.identity(), cam)
        # Principal ray hits the pattern center; quadrants have opposite values.
        cx, cy = int(cam.cx), int(cam.cy)
        assert img[cy - 10, cx - 10] != img[cy - 10, cx + 10]
        assert img[cy - 10, cx - 10] == img[cy + 10, cx + 10]

    def test_pinhole_scaling(self, cam):
        pattern = np.ones((2, 2), dtype=bool)
        for z in (1.0, 2.0):
            scene = SceneConfig(planes=(PlaneSpec(z, pattern, (0.5, 0.5)),))
            img = render_intensity(scene, SE3.identity(), cam)
            width_px = (img[int(cam.cy), :] == scene.bright).sum()
            expected = 0.5 * cam.fx / z
            assert abs(width_px - expected) <= 2.0

    def test_looking_away_is_background(self, cam):
        scene = single_plane_scene(cam)
        flip = SE3(np.diag([1.0, -1.0, -1.0]), np.zeros(3))  # 180 deg about x
        img = render_intensity(scene, flip, cam)
        assert np.all(img == scene.background)

    def test_camera_inside_plane_rejected(self, cam):
        scene = single_plane_scene(cam, depth=1.0)
        with pytest.raises(ValueError, match="camera lies in a scene plane"):
            render_intensity(scene, SE3(np.eye(3), [0.0, 0.0, 1.0]), cam)


class TestGroundTruthDepth:
    def test_frontoparallel_plane(self, cam):
        scene = single_plane_scene(cam, depth=2.0)
        rho = ground_truth_inverse_depth(scene, SE3.identity(), cam, (cam.cx, cam.cy))
        assert rho == pytest.approx(0.5)

    def test_miss_returns_none(self, cam):
        pattern = np.ones((2, 2), dtype=bool)
        scene = SceneConfig(planes=(PlaneSpec(1.0, pattern, (0.1, 0.1)),))
        assert ground_truth_inverse_depth(scene, SE3.identity(), cam, (0.0, 0.0)) is None

    def test_translated_camera(self, cam):
        scene = single_plane_scene(cam, depth=2.0)
        pose = SE3(np.eye(3), [0.0, 0.0, 0.5])
        rho = ground_truth_inverse_depth(scene, pose, cam, (cam.cx, cam.cy))
        assert rho == pytest.approx(1.0 / 1.5)

    def test_occlusion_order(self, cam):
        near = PlaneSpec(1.0, np.ones((2, 2), dtype=bool), (0.5, 0.5))
        far = PlaneSpec(3.0, np.ones((2, 2), dtype=bool), (8.0, 8.0))
        scene = SceneConfig(planes=(far, near))
        rho = ground_truth_inverse_depth(scene, SE3.identity(), cam, (cam.cx, cam.cy))
        assert rho == pytest.approx(1.0)

    def test_depth_map_matches_pointwise(self, cam):
        scene = three_plane_scene(cam)
        inv = ground_truth_inverse_depth_map(scene, SE3.identity(), cam)
        rng = np.random.default_rng(0)
        for _ in range(25):
            x = int(rng.integers(0, cam.width))
            y = int(rng.integers(0, cam.height))
            rho = ground_truth_inverse_depth(scene, SE3.identity(), cam, (x, y))
            if rho is None:
                assert math.isnan(inv[y, x])
            else:
                assert inv[y, x] == pytest.approx(rho)


class TestSimulateEvents:
    def test_static_trajectory_no_events(self, rig):
        scene = single_plane_scene(rig.left)
        traj = SimTrajectory("translate-x", duration=0.2, speed=0.0)
        out = simulate_events(scene, traj, rig, frame_rate=200.0)
        assert len(out.events_left) == 0
        assert len(out.events_right) == 0

    def test_single_edge_crossings(self, rig):
        # One vertical edge sweeping past pixels: per dark->bright flip a pixel
        # emits exactly one event per contrast level between the two log
        # intensities, all positive; hand count: 5 levels for 0.2 -> 0.8, C=0.3.
        # Camera moves +x, so each pixel's ray sweeps from the dark half of the
        # pattern into the bright half: dark -> bright, positive polarity.
        cam = rig.left
        pattern = np.array([[False, True]])
        scene = SceneConfig(planes=(PlaneSpec(1.0, pattern, (4.0, 4.0)),))
        traj = SimTrajectory("translate-x", duration=0.5, speed=0.2)
        out = simulate_events(scene, traj, rig, contrast_threshold=0.3,
                              frame_rate=400.0)
        expected = math.floor(math.log(0.8) / 0.3) - math.floor(math.log(0.2) / 0.3)
        assert expected == 5
        ev = out.events_left
        mid_row = ev[ev["y"] == int(cam.cy)]
        crossed = np.unique(mid_row["x"])
        counts = [int((mid_row["x"] == x).sum()) for x in crossed]
        assert counts and all(c == 5 for c in counts)
        assert np.all(mid_row["p"] == 1)

    def test_streams_sorted_and_in_bounds(self, rig):
        scene = three_plane_scene(rig.left)
        traj = SimTrajectory("translate-x", duration=0.3, speed=0.15)
        out = simulate_events(scene, traj, rig, frame_rate=500.0)
        for ev in (out.events_left, out.events_right):
            assert len(ev) > 0
            assert np.all(np.diff(ev["t"]) >= 0.0)
            assert ev["x"].min() >= 0 and ev["x"].max() < rig.left.width
            assert ev["y"].min() >= 0 and ev["y"].max() < rig.left.height

    def test_event_count_scales_with_speed(self, rig):
        scene = three_plane_scene(rig.left)
        counts = []
        for speed in (0.05, 0.1):
            traj = SimTrajectory("translate-y", duration=1.0, speed=speed)
            out = simulate_events(scene, traj, rig, frame_rate=1000.0)
            counts.append(len(out.events_left))
        ratio = counts[1] / counts[0]
        assert 2.0 * 0.9 <= ratio <= 2.0 * 1.1

    def test_mirrored_trajectory_flips_polarity(self, rig):
        cam = rig.left
        scene = single_plane_scene(cam, depth=1.2, seed=3)
        fwd = SimTrajectory("translate-x", duration=0.4, speed=0.15)
        out_f = simulate_events(scene, fwd, rig, frame_rate=500.0)

        class Reversed(SimTrajectory):
            def pose_at(self, t):
                return SE3(np.eye(3), [0.15 * (0.4 - t), 0.0, 0.0])

        rev = Reversed("translate-x", duration=0.4, speed=0.15)
        out_r = simulate_events(scene, rev, rig, frame_rate=500.0)
        for pol in (1, -1):
            a = out_f.events_left[out_f.events_left["p"] == pol]
            b = out_r.events_left[out_r.events_left["p"] == -pol]
            ca = np.zeros((cam.height, cam.width), dtype=int)
            cb = np.zeros_like(ca)
            np.add.at(ca, (a["y"], a["x"]), 1)
            np.add.at(cb, (b["y"], b["x"]), 1)
            assert np.array_equal(ca, cb)

    def test_frame_rate_check(self, rig):
        scene = single_plane_scene(rig.left, depth=1.0)
        traj = SimTrajectory("translate-x", duration=0.5, speed=2.0)
        with pytest.raises(ValueError, match="frame rate too low"):
            simulate_events(scene, traj, rig, frame_rate=50.0)

    def test_stereo_disparity_consistency(self, rig):
        # The right stream is the left stream shifted by the GT disparity.
        cam = rig.left
        scene = single_plane_scene(cam, depth=1.5, seed=5)
        traj = SimTrajectory("translate-y", duration=0.4, speed=0.12)
        out = simulate_events(scene, traj, rig, frame_rate=500.0)
        disparity = cam.fx * 0.1 / 1.5
        assert disparity == pytest.approx(8.0)
        left_count = np.zeros((cam.height, cam.width))
        right_count = np.zeros_like(left_count)
        np.add.at(left_count, (out.events_left["y"], out.events_left["x"]), 1)
        np.add.at(right_count, (out.events_right["y"], out.events_right["x"]), 1)
        d = int(round(disparity))
        shifted = np.roll(left_count, -d, axis=1)
        both = (shifted > 0) | (right_count > 0)
        agree = (shifted > 0) & (right_count > 0)
        assert agree.sum() / both.sum() > 0.85

    def test_ground_truth_outputs(self, rig):
        scene = three_plane_scene(rig.left)
        traj = SimTrajectory("translate-x", duration=0.3, speed=0.1)
        out = simulate_events(scene, traj, rig, frame_rate=500.0, depth_map_rate=10.0)
        assert len(out.trajectory) >= 2
        assert len(out.depth_maps) >= 3
        t_last, pose_last = out.trajectory.pose_at_index(len(out.trajectory) - 1)
        assert pose_last.t[0] == pytest.approx(0.1 * t_last)

    def test_timestamp_jitter_resorts(self, rig):
        scene = single_plane_scene(rig.left, depth=1.2)
        traj = SimTrajectory("translate-x", duration=0.2, speed=0.1)
        out = simulate_events(scene, traj, rig, frame_rate=500.0,
                              timestamp_jitter=1e-4, seed=1)
        assert np.all(np.diff(out.events_left["t"]) >= 0.0)
