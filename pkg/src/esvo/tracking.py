"""Camera tracking by registering a semi-dense depth map to the time-surface
negative.

The blurred negative acts as an anisotropic distance field whose minima lie
on the most recent edge locations, so the pose that drops the warped map
support into those minima is found by forward-compositional Gauss-Newton /
Levenberg-Marquardt:  each iteration linearizes around a zero pose increment,
solves for it on a (possibly stochastic) batch of support points with Huber
IRLS, and composes the increment onto the current warp.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .geometry import (
    SE3,
    CameraModel,
    MotionParams,
    back_project,
    bearing,
    cayley_from_se3,
    project,
    projection_jacobian,
    se3_from_cayley,
    skew,
)
from .time_surface import TimeSurface, bilinear_with_gradient

_Z_EPS = 1e-9


@dataclass(frozen=True)
class TrackerConfig:
    batch_size: int = 300
    max_iterations: int = 5
    huber_delta: float = 10.0
    lm_lambda0: float = 1e-3
    seed: int = 0
    full_batch: bool = False
    step_tol: float = 1e-8
    # Trust region on the induced image displacement per iteration: keeps an
    # underdamped first step from leaping across edge spacing into an alias.
    max_step_px: float = 2.0

    def __post_init__(self) -> None:
        if self.batch_size < 6:
            raise ValueError("batch size must cover the 6 degrees of freedom")
        if self.max_iterations < 1:
            raise ValueError("need at least one iteration")
        if self.huber_delta <= 0.0:
            raise ValueError("huber delta must be positive")


@dataclass(frozen=True)
class TrackingProblem:
    """Registration of reference map support against a blurred TS negative."""

    ref_pixels: np.ndarray      # (M, 2) pixel locations with valid depth
    ref_inv_depths: np.ndarray  # (M,) inverse depths at those pixels
    ref_pose: SE3               # world pose of the reference camera
    target: TimeSurface         # blurred time-surface negative at time k
    cam: CameraModel
    theta0: MotionParams = field(default_factory=MotionParams.zero)

    def __post_init__(self) -> None:
        if len(self.ref_pixels) == 0:
            raise ValueError("reference map is empty")
        if len(self.ref_pixels) != len(self.ref_inv_depths):
            raise ValueError("support pixels and depths must align")

    @staticmethod
    def from_map(depth_map, target: TimeSurface, cam: CameraModel,
                 theta0: MotionParams | None = None) -> "TrackingProblem":
        pixels, inv_depths = depth_map.support()
        return TrackingProblem(ref_pixels=pixels, ref_inv_depths=inv_depths,
                               ref_pose=depth_map.ref_pose, target=target, cam=cam,
                               theta0=theta0 or MotionParams.zero())


class TrackResult(NamedTuple):
    pose: SE3        # world pose of the left camera at the target time
    cost: float      # robust objective over the full support at the solution
    iterations: int


def warp_point(x, rho: float, theta: MotionParams, cam: CameraModel) -> np.ndarray:
    """Transfer a reference pixel with inverse depth through the candidate
    motion: project(G(theta) * back_project(x, rho))."""
    if rho <= 0.0:
        raise ValueError("warp invalid: non-positive inverse depth")
    P = se3_from_cayley(theta).apply(back_project(cam, np.asarray(x, dtype=np.float64), rho))
    if P[2] <= _Z_EPS:
        raise ValueError("warp invalid: point behind camera")
    out = project(cam, P)
    if not (0.0 <= out[0] <= cam.width - 1 and 0.0 <= out[1] <= cam.height - 1):
        raise ValueError("warp invalid: point leaves the image")
    return out


def huber_weight(r, delta: float):
    """IRLS weight of the Huber norm: 1 inside delta, delta/|r| outside."""
    if delta <= 0.0:
        raise ValueError("huber delta must be positive")
    a = np.abs(np.asarray(r, dtype=np.float64))
    with np.errstate(divide="ignore"):
        w = np.where(a <= delta, 1.0, delta / a)
    if np.isscalar(r) or np.ndim(r) == 0:
        return float(w)
    return w


def huber_cost(r: np.ndarray, delta: float) -> float:
    """Mean Huber loss; the mean keeps costs comparable when the number of
    in-view points changes between candidate poses."""
    if len(r) == 0:
        return float("inf")
    a = np.abs(r)
    quad = 0.5 * a * a
    lin = delta * (a - 0.5 * delta)
    return float(np.where(a <= delta, quad, lin).mean())


def _warp_batch(P0: np.ndarray, G_total: SE3, cam: CameraModel):
    """Warp reference points, sample the target, return everything the
    linearization needs.  Off-image or behind-camera points are masked."""
    P = P0 @ G_total.R.T + G_total.t
    ok = P[:, 2] > _Z_EPS
    z = np.where(ok, P[:, 2], 1.0)
    u = cam.cx + cam.fx * P[:, 0] / z
    v = cam.cy + cam.fy * P[:, 1] / z
    return P, u, v, ok


def tracking_residuals(problem: TrackingProblem, theta: MotionParams,
                       delta_theta: MotionParams, batch: np.ndarray | None = None,
                       with_warp_jacobian: bool = False):
    """Residuals of the composed warp and the 6-DoF Jacobian at zero increment.

    Returns (residuals, jacobian (n, 6), valid).  The residual of a point is
    the sampled value of the blurred negative at its composed warp; the
    Jacobian chains the surface gradient, the projection, the current
    rotation, and the Cayley generator d(R(dc) P)/d(dc)|_0 = -2 [P]_x.
    With with_warp_jacobian the (n, 2, 6) pixel-motion Jacobian is appended
    to the return tuple (used for step-length control).
    """
    if batch is None:
        batch = np.arange(len(problem.ref_pixels))
    if len(batch) == 0:
        raise ValueError("insufficient support: empty batch")
    pixels = problem.ref_pixels[batch]
    rhos = problem.ref_inv_depths[batch]
    P0 = bearing(problem.cam, pixels) / rhos[:, None]
    G_theta = se3_from_cayley(theta)
    G_comp = G_theta @ se3_from_cayley(delta_theta)

    P, u, v, ok = _warp_batch(P0, G_comp, problem.cam)
    val, gx, gy, inb = bilinear_with_gradient(problem.target.values, u, v)
    valid = ok & inb
    r = np.where(valid, val, 0.0)

    # Linearization point for the Jacobian is always the zero increment.
    P_lin = P0 @ G_theta.R.T + G_theta.t if (delta_theta.c.any() or delta_theta.t.any()) else P
    Jpi = projection_jacobian(problem.cam, np.where(P_lin[:, 2:3] > _Z_EPS, P_lin,
                                                    [0.0, 0.0, 1.0]))
    M = np.einsum("nij,jk->nik", Jpi, G_theta.R)          # (n, 2, 3)
    rot_block = -2.0 * np.einsum("nij,njk->nik", M, skew_many(P0))
    J6 = np.concatenate([rot_block, M], axis=2)           # (n, 2, 6)
    J = gx[:, None] * J6[:, 0, :] + gy[:, None] * J6[:, 1, :]
    J = np.where(valid[:, None], J, 0.0)
    if valid.sum() < 6:
        raise ValueError("insufficient support: fewer than 6 usable points")
    if with_warp_jacobian:
        return r, J, valid, J6
    return r, J, valid


def skew_many(P: np.ndarray) -> np.ndarray:
    out = np.zeros(P.shape[:-1] + (3, 3))
    x, y, z = P[..., 0], P[..., 1], P[..., 2]
    out[..., 0, 1] = -z
    out[..., 0, 2] = y
    out[..., 1, 0] = z
    out[..., 1, 2] = -x
    out[..., 2, 0] = -y
    out[..., 2, 1] = x
    return out


def objective_value(problem: TrackingProblem, theta: MotionParams) -> float:
    """Mean squared negative value of the warped support (registration
    objective normalized by the number of points that stay in view)."""
    P0 = bearing(problem.cam, problem.ref_pixels) / problem.ref_inv_depths[:, None]
    P, u, v, ok = _warp_batch(P0, se3_from_cayley(theta), problem.cam)
    val, _, _, inb = bilinear_with_gradient(problem.target.values, u, v)
    valid = ok & inb
    if not valid.any():
        return float("inf")
    return float((val[valid] ** 2).mean())


def track(problem: TrackingProblem, config: TrackerConfig = TrackerConfig()) -> TrackResult:
    """Solve the registration and return the absolute pose at the target time.

    Each iteration linearizes once on a freshly sampled batch of support
    points (or the full support in deterministic mode) and takes one damped
    step: the damping is raised tenfold and the step re-solved from the same
    linearization until the batch cost stops increasing, then lowered tenfold
    for the next iteration.  Accepted increments compose onto the warp.
    Deterministic for a fixed seed.
    """
    rng = np.random.default_rng(config.seed)
    m = len(problem.ref_pixels)
    theta = problem.theta0
    lam = config.lm_lambda0
    iterations = 0
    last_step = np.inf
    for _ in range(config.max_iterations):
        if config.full_batch or config.batch_size >= m:
            batch = np.arange(m)
        else:
            batch = rng.choice(m, size=config.batch_size, replace=False)
        r, J, valid, J_warp = tracking_residuals(problem, theta, MotionParams.zero(),
                                                 batch, with_warp_jacobian=True)
        if np.abs(J).max() == 0.0:
            raise ValueError("insufficient support: zero gradient everywhere")
        w = huber_weight(r, config.huber_delta) * valid
        A = (J * w[:, None]).T @ J
        g = J.T @ (w * r)
        cost_cur = huber_cost(r[valid], config.huber_delta)
        iterations += 1
        for _ in range(8):
            step = np.linalg.solve(A + lam * np.diag(np.diag(A)) + 1e-12 * np.eye(6),
                                   -g)
            if not np.isfinite(step).all():
                raise ValueError("diverged: non-finite pose update")
            if config.max_step_px > 0.0:
                d_px = np.einsum("nij,j->ni", J_warp, step)
                moved = np.hypot(d_px[:, 0], d_px[:, 1])[valid]
                p90 = float(np.percentile(moved, 90)) if len(moved) else 0.0
                if p90 > config.max_step_px:
                    step = step * (config.max_step_px / p90)
            cand = cayley_from_se3(se3_from_cayley(theta)
                                   @ se3_from_cayley(MotionParams.from_vector(step)))
            r_new, _, valid_new = tracking_residuals(problem, cand,
                                                     MotionParams.zero(), batch)
            cost_new = huber_cost(r_new[valid_new], config.huber_delta)
            if not np.isfinite(cost_new):
                raise ValueError("diverged: non-finite cost")
            if cost_new <= cost_cur:
                theta = cand
                lam = max(lam / 10.0, 1e-12)
                last_step = float(np.linalg.norm(step))
                break
            lam *= 10.0
        if last_step < config.step_tol:
            break
    r_all, _, valid_all = tracking_residuals(problem, theta, MotionParams.zero())
    final_cost = huber_cost(r_all[valid_all], config.huber_delta)
    pose = problem.ref_pose @ se3_from_cayley(theta).inverse()
    return TrackResult(pose=pose, cost=final_cost, iterations=iterations)
