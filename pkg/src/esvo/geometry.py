"""Camera models, SE(3) transforms, Cayley parameters, and pose trajectories."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

_ORTHONORMAL_TOL = 1e-9


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera on undistorted, stereo-rectified coordinates."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.fx <= 0.0 or self.fy <= 0.0:
            raise ValueError("focal lengths must be positive")
        if not (0.0 <= self.cx < self.width):
            raise ValueError("cx outside image")
        if not (0.0 <= self.cy < self.height):
            raise ValueError("cy outside image")


class SE3:
    """Rigid transform: X_out = R @ X_in + t.  Treated as immutable."""

    __slots__ = ("R", "t")

    def __init__(self, R: np.ndarray, t: np.ndarray):
        R = np.asarray(R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(t, dtype=np.float64).reshape(3)
        err = np.abs(R.T @ R - np.eye(3)).max()
        if err > _ORTHONORMAL_TOL:
            raise ValueError(f"rotation not orthonormal (|R'R - I| = {err:.3e})")
        if abs(np.linalg.det(R) - 1.0) > _ORTHONORMAL_TOL:
            raise ValueError("rotation determinant is not +1")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @staticmethod
    def identity() -> "SE3":
        return SE3(np.eye(3), np.zeros(3))

    def __matmul__(self, other: "SE3") -> "SE3":
        return SE3(self.R @ other.R, self.R @ other.t + self.t)

    def inverse(self) -> "SE3":
        Rt = self.R.T
        return SE3(Rt, -Rt @ self.t)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one point (3,) or a stack (..., 3)."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.R.T + self.t

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.t
        return M

    @staticmethod
    def from_matrix(M: np.ndarray) -> "SE3":
        M = np.asarray(M, dtype=np.float64)
        if M.shape != (4, 4):
            raise ValueError("expected 4x4 homogeneous matrix")
        return SE3(M[:3, :3], M[:3, 3])

    def rotation_angle(self) -> float:
        """Geodesic rotation angle in radians, in [0, pi]."""
        c = 0.5 * (np.trace(self.R) - 1.0)
        return math.acos(min(1.0, max(-1.0, c)))

    def __repr__(self) -> str:
        return f"SE3(R={self.R.tolist()}, t={self.t.tolist()})"


@dataclass(frozen=True)
class MotionParams:
    """6-DoF motion as Cayley rotation parameters plus translation."""

    c: np.ndarray
    t: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "c", np.asarray(self.c, dtype=np.float64).reshape(3))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3))
        if not (np.isfinite(self.c).all() and np.isfinite(self.t).all()):
            raise ValueError("motion parameters must be finite")

    @staticmethod
    def zero() -> "MotionParams":
        return MotionParams(np.zeros(3), np.zeros(3))

    @staticmethod
    def from_vector(v: np.ndarray) -> "MotionParams":
        v = np.asarray(v, dtype=np.float64).reshape(6)
        return MotionParams(v[:3], v[3:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.c, self.t])


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def se3_from_cayley(theta: MotionParams) -> SE3:
    """Cayley map: R = (I + [c]x)(I - [c]x)^-1, rotation angle 2*atan(|c|)."""
    c = theta.c
    K = skew(c)
    R = np.eye(3) + (2.0 / (1.0 + c @ c)) * (K + K @ K)
    return SE3(R, theta.t)


def cayley_from_se3(T: SE3) -> MotionParams:
    """Inverse Cayley map; undefined at 180 degrees rotation."""
    rotvec = Rotation.from_matrix(T.R).as_rotvec()
    angle = float(np.linalg.norm(rotvec))
    if angle >= math.pi - 1e-9:
        raise ValueError("cayley singularity: rotation angle too close to 180 degrees")
    if angle < 1e-9:
        factor = 0.5 + angle * angle / 24.0
    else:
        factor = math.tan(0.5 * angle) / angle
    return MotionParams(factor * rotvec, T.t.copy())


def project(cam: CameraModel, P: np.ndarray) -> np.ndarray:
    """Project camera-frame points (..., 3) onto the image plane (..., 2)."""
    P = np.asarray(P, dtype=np.float64)
    z = P[..., 2]
    if np.any(z <= 0.0):
        raise ValueError("behind camera: point has non-positive depth")
    out = np.empty(P.shape[:-1] + (2,))
    out[..., 0] = cam.cx + cam.fx * P[..., 0] / z
    out[..., 1] = cam.cy + cam.fy * P[..., 1] / z
    return out


def back_project(cam: CameraModel, x: np.ndarray, rho) -> np.ndarray:
    """Back-project pixels (..., 2) with inverse depth rho into 3D (..., 3)."""
    x = np.asarray(x, dtype=np.float64)
    rho = np.asarray(rho, dtype=np.float64)
    if np.any(rho <= 0.0):
        raise ValueError("non-positive inverse depth")
    ray = np.empty(x.shape[:-1] + (3,))
    ray[..., 0] = (x[..., 0] - cam.cx) / cam.fx
    ray[..., 1] = (x[..., 1] - cam.cy) / cam.fy
    ray[..., 2] = 1.0
    return ray / np.expand_dims(rho, -1)


def bearing(cam: CameraModel, x: np.ndarray) -> np.ndarray:
    """Unit-depth ray direction ((u-cx)/fx, (v-cy)/fy, 1) for pixels (..., 2)."""
    x = np.asarray(x, dtype=np.float64)
    ray = np.empty(x.shape[:-1] + (3,))
    ray[..., 0] = (x[..., 0] - cam.cx) / cam.fx
    ray[..., 1] = (x[..., 1] - cam.cy) / cam.fy
    ray[..., 2] = 1.0
    return ray


def projection_jacobian(cam: CameraModel, P: np.ndarray) -> np.ndarray:
    """d(pixel)/d(point) of `project`, shape (..., 2, 3)."""
    P = np.asarray(P, dtype=np.float64)
    X, Y, Z = P[..., 0], P[..., 1], P[..., 2]
    J = np.zeros(P.shape[:-1] + (2, 3))
    inv_z = 1.0 / Z
    J[..., 0, 0] = cam.fx * inv_z
    J[..., 0, 2] = -cam.fx * X * inv_z * inv_z
    J[..., 1, 1] = cam.fy * inv_z
    J[..., 1, 2] = -cam.fy * Y * inv_z * inv_z
    return J


@dataclass(frozen=True)
class StereoRig:
    """Calibrated stereo pair; T_right_left maps left-camera to right-camera coords."""

    left: CameraModel
    right: CameraModel
    T_right_left: SE3

    @property
    def baseline(self) -> float:
        return float(np.linalg.norm(self.T_right_left.t))

    def check_rectified(self, tol: float = 1e-6) -> None:
        """Rectified rig: identity relative rotation, translation along -x."""
        T = self.T_right_left
        if np.abs(T.R - np.eye(3)).max() > tol:
            raise ValueError("rig is not rectified: relative rotation is not identity")
        b = self.baseline
        if b <= 0.0 or T.t[0] >= 0.0 or max(abs(T.t[1]), abs(T.t[2])) > tol * max(b, 1.0):
            raise ValueError("rig is not rectified: baseline not along -x")


def quat_from_rotation(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (x, y, z, w) for a rotation matrix."""
    return Rotation.from_matrix(R).as_quat()


def rotation_from_quat(q: np.ndarray) -> np.ndarray:
    return Rotation.from_quat(q).as_matrix()


def _slerp(q0: np.ndarray, q1: np.ndarray, u) -> np.ndarray:
    """Spherical-linear interpolation of quaternion rows; u broadcasts."""
    q0 = np.atleast_2d(q0)
    q1 = np.atleast_2d(q1).copy()
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))[:, None]
    dot = np.sum(q0 * q1, axis=1, keepdims=True)
    q1[dot[:, 0] < 0.0] *= -1.0
    dot = np.abs(dot)
    out = np.empty_like(q0)
    close = dot[:, 0] > 1.0 - 1e-12
    if np.any(close):
        lerp = (1.0 - u[close]) * q0[close] + u[close] * q1[close]
        out[close] = lerp / np.linalg.norm(lerp, axis=1, keepdims=True)
    far = ~close
    if np.any(far):
        omega = np.arccos(np.clip(dot[far], -1.0, 1.0))
        so = np.sin(omega)
        out[far] = (np.sin((1.0 - u[far]) * omega) / so) * q0[far] + (
            np.sin(u[far] * omega) / so
        ) * q1[far]
    return out


class TrajectoryDB:
    """Time-indexed SE(3) poses; supports interpolated queries at any timestamp.

    Timestamps must be strictly increasing.  Queries outside the stored span
    clamp to the nearest endpoint pose.
    """

    def __init__(self):
        self._times: list[float] = []
        self._poses: list[SE3] = []
        self._quats: list[np.ndarray] = []

    def __len__(self) -> int:
        return len(self._times)

    @property
    def timestamps(self) -> np.ndarray:
        return np.asarray(self._times)

    @property
    def poses(self) -> list[SE3]:
        return list(self._poses)

    def append(self, t: float, pose: SE3, quat: np.ndarray | None = None) -> None:
        if self._times and t <= self._times[-1]:
            raise ValueError("trajectory timestamps must be strictly increasing")
        self._times.append(float(t))
        self._poses.append(pose)
        # Cache the wire-format quaternion so file round trips are bit-exact.
        self._quats.append(np.asarray(quat, dtype=np.float64) if quat is not None
                           else quat_from_rotation(pose.R))

    def pose_at_index(self, i: int) -> tuple[float, SE3]:
        return self._times[i], self._poses[i]

    def quat_at_index(self, i: int) -> np.ndarray:
        return self._quats[i]

    def interpolate(self, t: float) -> SE3:
        R, trans = self.interpolate_many(np.asarray([t]))
        return SE3(R[0], trans[0])

    def interpolate_many(self, ts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Batched interpolation; returns rotations (m, 3, 3) and translations (m, 3)."""
        if not self._times:
            raise ValueError("no poses in trajectory")
        ts = np.asarray(ts, dtype=np.float64)
        times = np.asarray(self._times)
        if len(self._times) == 1:
            R = np.broadcast_to(self._poses[0].R, (len(ts), 3, 3)).copy()
            tr = np.broadcast_to(self._poses[0].t, (len(ts), 3)).copy()
            return R, tr
        idx = np.clip(np.searchsorted(times, ts, side="right") - 1, 0, len(times) - 2)
        t0 = times[idx]
        t1 = times[idx + 1]
        u = np.clip((ts - t0) / (t1 - t0), 0.0, 1.0)
        quats = np.asarray(self._quats)
        q = _slerp(quats[idx], quats[idx + 1], u)
        R = Rotation.from_quat(q).as_matrix()
        trans_knots = np.asarray([p.t for p in self._poses])
        tr = (1.0 - u)[:, None] * trans_knots[idx] + u[:, None] * trans_knots[idx + 1]
        return R, tr


def interpolate_pose(traj: TrajectoryDB, t: float) -> SE3:
    """Pose at time t: lerp on translation, slerp on rotation, clamped to the span."""
    return traj.interpolate(t)


_CALIB_KEYS = ("fx_l", "fy_l", "cx_l", "cy_l", "fx_r", "fy_r", "cx_r", "cy_r",
               "width", "height", "baseline_m")


def _parse_kv_file(path) -> dict[str, str]:
    values: dict[str, str] = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"malformed line in {path}: {raw!r}")
        key, val = line.split("=", 1)
        values[key.strip()] = val.strip()
    return values


def load_calibration(path) -> StereoRig:
    """Read a rectified-rig calibration file (key=value)."""
    values = _parse_kv_file(path)
    missing = [k for k in _CALIB_KEYS if k not in values]
    if missing:
        raise ValueError(f"calibration file missing keys: {', '.join(missing)}")
    unknown = [k for k in values if k not in _CALIB_KEYS]
    if unknown:
        raise ValueError(f"calibration file has unknown keys: {', '.join(unknown)}")
    w = int(values["width"])
    h = int(values["height"])
    left = CameraModel(float(values["fx_l"]), float(values["fy_l"]),
                       float(values["cx_l"]), float(values["cy_l"]), w, h)
    right = CameraModel(float(values["fx_r"]), float(values["fy_r"]),
                        float(values["cx_r"]), float(values["cy_r"]), w, h)
    baseline = float(values["baseline_m"])
    if baseline <= 0.0:
        raise ValueError("baseline_m must be positive")
    T_rl = SE3(np.eye(3), np.array([-baseline, 0.0, 0.0]))
    return StereoRig(left, right, T_rl)


def save_calibration(rig: StereoRig, path) -> None:
    lines = [
        f"fx_l={float(rig.left.fx)!r}", f"fy_l={float(rig.left.fy)!r}",
        f"cx_l={float(rig.left.cx)!r}", f"cy_l={float(rig.left.cy)!r}",
        f"fx_r={float(rig.right.fx)!r}", f"fy_r={float(rig.right.fy)!r}",
        f"cx_r={float(rig.right.cx)!r}", f"cy_r={float(rig.right.cy)!r}",
        f"width={rig.left.width}", f"height={rig.left.height}",
        f"baseline_m={float(rig.baseline)!r}",
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def save_trajectory(traj: TrajectoryDB, path) -> None:
    """Write one pose per line: t tx ty tz qx qy qz qw (scalar-last quaternion)."""
    lines = []
    for i in range(len(traj)):
        t, pose = traj.pose_at_index(i)
        q = traj.quat_at_index(i)
        vals = [t, *pose.t, *q]
        lines.append(" ".join(repr(float(v)) for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def load_trajectory(path) -> TrajectoryDB:
    traj = TrajectoryDB()
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 8:
            raise ValueError(f"malformed trajectory line: {raw!r}")
        vals = [float(p) for p in parts]
        q = np.asarray(vals[4:8])
        traj.append(vals[0], SE3(rotation_from_quat(q), vals[1:4]), quat=q)
    return traj
