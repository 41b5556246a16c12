"""Shared fixtures: a small stereo rig, cached synthetic sequences, and the
analytic registration oracle used by the tracking tests."""

import numpy as np
import pytest

from esvo.geometry import SE3, CameraModel, MotionParams, StereoRig, cayley_from_se3
from esvo.mapping import StereoObservation
from esvo.simulator import (
    SimTrajectory,
    edge_distance_field,
    scene_edge_points,
    simulate_events,
    three_plane_scene,
)
from esvo.time_surface import LastEventMap, TimeSurface, blur, render
from esvo.tracking import TrackingProblem


def make_rig(width=160, height=120, f=120.0, baseline=0.1) -> StereoRig:
    cam = CameraModel(fx=f, fy=f, cx=(width - 1) / 2, cy=(height - 1) / 2,
                      width=width, height=height)
    return StereoRig(cam, cam, SE3(np.eye(3), [-baseline, 0.0, 0.0]))


@pytest.fixture(scope="session")
def rig():
    return make_rig()


class ObservationCursor:
    """Incrementally ingest stereo events and render observations in time order."""

    def __init__(self, events_left, events_right, rig, eta=0.03):
        self.ev_l = events_left
        self.ev_r = events_right
        self.rig = rig
        self.eta = eta
        self.map_l = LastEventMap(rig.left.width, rig.left.height)
        self.map_r = LastEventMap(rig.right.width, rig.right.height)
        self._il = 0
        self._ir = 0

    def observation_at(self, t: float) -> StereoObservation:
        jl = np.searchsorted(self.ev_l["t"], t, side="right")
        jr = np.searchsorted(self.ev_r["t"], t, side="right")
        if jl > self._il:
            self.map_l.ingest(self.ev_l[self._il:jl])
            self._il = jl
        if jr > self._ir:
            self.map_r.ingest(self.ev_r[self._ir:jr])
            self._ir = jr
        return StereoObservation(render(self.map_l, t, self.eta),
                                 render(self.map_r, t, self.eta))


@pytest.fixture(scope="session")
def sim_three_planes(rig):
    """Three-plane scene swept by a translating camera, 1.2 s.

    Mild timestamp jitter gives the residuals realistic spread; a perfectly
    clean stream makes every estimate exact and leaves fusion nothing to do.
    """
    scene = three_plane_scene(rig.left, seed=11)
    traj = SimTrajectory("translate-x", duration=1.2, speed=0.15)
    return simulate_events(scene, traj, rig, frame_rate=1000.0, seed=0,
                           timestamp_jitter=1e-3)


@pytest.fixture(scope="session")
def sim_plane_z2(rig):
    """Single fronto-parallel plane at 2 m, translating camera."""
    from esvo.simulator import single_plane_scene

    scene = single_plane_scene(rig.left, depth=2.0, seed=7)
    traj = SimTrajectory("translate-x", duration=0.8, speed=0.12)
    return simulate_events(scene, traj, rig, frame_rate=1000.0, seed=0)


def cursor_for(sim, rig, eta=0.03) -> ObservationCursor:
    return ObservationCursor(sim.events_left, sim.events_right, rig, eta=eta)


def ideal_registration_setup(t_ref: float, t_k: float, seed: int = 11,
                             n_support: int = 3000, gain: float = 10.0,
                             deadband: float = 0.5):
    """Registration oracle: analytic edge support against an idealized
    distance-field target at a known GT pose.

    A decayed event surface carries an intrinsic sub-pixel trailing bias
    (its minima sit at last-crossed pixel centers, not on the true edge), so
    the solver-accuracy oracle uses the exact distance field the negative
    approximates: value = gain * max(dist_to_edge - deadband, 0)^2.  Support
    points are exact scene edge points visible at the target time, carried
    into the reference frame through the GT trajectory.

    Returns (problem, theta_gt, pose_k).
    """
    cam = CameraModel(fx=150.0, fy=150.0, cx=172.5, cy=129.5, width=346, height=260)
    scene = three_plane_scene(cam, seed=seed, sweep=1.0, depths=(0.6, 1.1, 2.6))
    traj = SimTrajectory("translate-x", duration=max(t_k, t_ref) + 0.1, speed=0.8)
    pose_ref = traj.pose_at(t_ref)
    pose_k = traj.pose_at(t_k)
    vals = edge_distance_field(scene, pose_k, cam, fine=5, gain=gain,
                               deadband=deadband)
    target = blur(TimeSurface(t=t_k, values=vals, eta=0.03), 5)

    pts_w = scene_edge_points(scene, spacing=0.003)
    P_k = pose_k.inverse().apply(pts_w)
    okz = P_k[:, 2] > 1e-6
    u_k = cam.cx + cam.fx * P_k[okz, 0] / P_k[okz, 2]
    v_k = cam.cy + cam.fy * P_k[okz, 1] / P_k[okz, 2]
    vis = (u_k >= 1) & (u_k <= cam.width - 2) & (v_k >= 1) & (v_k <= cam.height - 2)
    P_ref = pose_ref.inverse().apply(pts_w[okz][vis])
    good = P_ref[:, 2] > 1e-6
    P_ref = P_ref[good]
    u = cam.cx + cam.fx * P_ref[:, 0] / P_ref[:, 2]
    v = cam.cy + cam.fy * P_ref[:, 1] / P_ref[:, 2]
    inb = (u >= 1) & (u <= cam.width - 2) & (v >= 1) & (v <= cam.height - 2)
    rng = np.random.default_rng(0)
    idx = rng.choice(np.flatnonzero(inb), size=min(n_support, int(inb.sum())),
                     replace=False)
    problem = TrackingProblem(ref_pixels=np.stack([u[idx], v[idx]], axis=1),
                              ref_inv_depths=1.0 / P_ref[idx, 2],
                              ref_pose=pose_ref, target=target, cam=cam)
    theta_gt = cayley_from_se3(pose_k.inverse() @ pose_ref)
    return problem, theta_gt, pose_k
