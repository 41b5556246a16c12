"""Semi-dense inverse depth estimation and probabilistic fusion.

Per-event depth is found by minimizing the squared temporal difference
between corresponding patches on a stereo pair of time surfaces, where the
correspondence is induced by an inverse depth hypothesis on the event's
viewing ray.  Residuals are heavy-tailed, so the solver supports IRLS with
Student's-t weights; converged estimates carry a Student's-t uncertainty
that is propagated to a common time and fused into a per-pixel depth map.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .geometry import (
    SE3,
    CameraModel,
    StereoRig,
    TrajectoryDB,
    bearing,
    projection_jacobian,
)
from .time_surface import TimeSurface, as_event_array, bilinear_with_gradient

RHO_MIN_DEFAULT = 0.1          # 1/m, farthest admissible depth 10 m
RHO_MAX_DEFAULT = 1.0 / 0.3    # 1/m, nearest admissible depth 0.3 m
ZNCC_THRESHOLD_DEFAULT = 0.7
DISPARITY_RANGE_DEFAULT = (0, 60)
MAX_ITERATIONS_DEFAULT = 10
STEP_TOL_FACTOR = 1e-6
_Z_EPS = 1e-9

# Refinement status codes used by the batched solver.
STATUS_OK = 0
STATUS_INSUFFICIENT = 1
STATUS_UNOBSERVABLE = 2
STATUS_DIVERGED = 3


@dataclass(frozen=True)
class StereoObservation:
    """Synchronized pair of left/right time surfaces at a common timestamp."""

    ts_left: TimeSurface
    ts_right: TimeSurface

    def __post_init__(self) -> None:
        if self.ts_left.t != self.ts_right.t:
            raise ValueError("stereo observation surfaces must share a timestamp")
        if self.ts_left.values.shape != self.ts_right.values.shape:
            raise ValueError("stereo observation surfaces must share a resolution")

    @property
    def t(self) -> float:
        return self.ts_left.t


@dataclass(frozen=True)
class PatchConfig:
    """Square comparison window; side must be odd so the event is centered."""

    side: int = 25

    def __post_init__(self) -> None:
        if self.side < 3 or self.side % 2 == 0:
            raise ValueError("patch side must be odd and >= 3")

    @property
    def radius(self) -> int:
        return self.side // 2

    def offsets(self) -> tuple[np.ndarray, np.ndarray]:
        """Row-major (du, dv) offsets covering the patch, each (side**2,)."""
        r = self.radius
        dv, du = np.mgrid[-r:r + 1, -r:r + 1]
        return du.ravel().astype(np.float64), dv.ravel().astype(np.float64)


@dataclass(frozen=True)
class ResidualModel:
    """Student's-t model of the temporal residuals: r ~ St(mu, s^2, nu)."""

    mu: float = 0.0
    s: float = 10.122
    nu: float = 2.207

    def __post_init__(self) -> None:
        if self.s <= 0.0:
            raise ValueError("residual scale must be positive")
        if self.nu <= 1.0:
            raise ValueError("residual degrees of freedom must exceed 1")

    def weights(self, r: np.ndarray) -> np.ndarray:
        """IRLS weight of each residual under the t model."""
        z = (r - self.mu) / self.s
        return (self.nu + 1.0) / (self.nu + z * z)


@dataclass(frozen=True)
class InverseDepthEstimate:
    """Student's-t distributed inverse depth at a pixel and timestamp."""

    mu: float
    s: float
    nu: float
    pixel: tuple[float, float]
    t: float

    def __post_init__(self) -> None:
        if self.s <= 0.0:
            raise ValueError("estimate scale must be positive")
        if self.nu <= 1.0:
            raise ValueError("estimate degrees of freedom must exceed 1")


def variance_of(e: InverseDepthEstimate) -> float:
    """Variance of the t distribution: nu/(nu-2) * s^2; needs nu > 2."""
    if e.nu <= 2.0:
        raise ValueError("undefined variance: degrees of freedom must exceed 2")
    return e.nu / (e.nu - 2.0) * e.s * e.s


@dataclass
class MapperConfig:
    patch: PatchConfig = field(default_factory=PatchConfig)
    rho_min: float = RHO_MIN_DEFAULT
    rho_max: float = RHO_MAX_DEFAULT
    zncc_threshold: float = ZNCC_THRESHOLD_DEFAULT
    disparity_range: tuple[int, int] = DISPARITY_RANGE_DEFAULT
    max_iterations: int = MAX_ITERATIONS_DEFAULT
    use_t_weights: bool = True
    event_budget: int = 1000
    event_pool: int = 10000
    seed: int = 0
    workers: int = 1


class SemiDenseDepthMap:
    """Per-pixel optional inverse depth distributions anchored to a pose."""

    def __init__(self, width: int, height: int, t: float, ref_pose: SE3):
        self.width = width
        self.height = height
        self.t = t
        self.ref_pose = ref_pose
        self.mu = np.full((height, width), np.nan)
        self.s = np.full((height, width), np.nan)
        self.nu = np.full((height, width), np.nan)
        self.n_assigned = 0
        self.n_fused = 0
        self.n_replaced = 0
        self.n_kept = 0

    @property
    def fusion_count(self) -> int:
        return self.n_fused

    def valid_mask(self) -> np.ndarray:
        return np.isfinite(self.mu)

    def n_valid(self) -> int:
        return int(self.valid_mask().sum())

    def estimate_at(self, x: int, y: int) -> InverseDepthEstimate | None:
        if math.isnan(self.mu[y, x]):
            return None
        return InverseDepthEstimate(mu=float(self.mu[y, x]), s=float(self.s[y, x]),
                                    nu=float(self.nu[y, x]),
                                    pixel=(float(x), float(y)), t=self.t)

    def support(self) -> tuple[np.ndarray, np.ndarray]:
        """Pixels carrying depth: integer coordinates (M, 2) and inverse depths (M,)."""
        ys, xs = np.nonzero(self.valid_mask())
        pix = np.stack([xs, ys], axis=1).astype(np.float64)
        return pix, self.mu[ys, xs]

    def sigma_grid(self) -> np.ndarray:
        """Per-pixel standard deviation, NaN where empty or variance undefined."""
        with np.errstate(invalid="ignore"):
            var = self.nu / (self.nu - 2.0) * self.s * self.s
            var = np.where(self.nu > 2.0, var, np.nan)
        return np.sqrt(var)


def zncc(a: np.ndarray, b: np.ndarray) -> float:
    """Zero-normalized cross-correlation of two equally sized patches."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError("patches must have the same size")
    a = a - a.mean()
    b = b - b.mean()
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("degenerate patch: zero variance")
    return float(np.dot(a, b) / (na * nb))


def _event_motions(traj: TrajectoryDB, t_obs: float, t_events: np.ndarray,
                   pose_obs: SE3 | None = None):
    """Relative motions camera(t_obs) <- camera(t_event), batched."""
    if pose_obs is None:
        pose_obs = traj.interpolate(t_obs)
    R_inv = pose_obs.R.T
    t_inv = -R_inv @ pose_obs.t
    R_e, t_e = traj.interpolate_many(t_events)
    R_rel = np.einsum("ij,njk->nik", R_inv, R_e)
    t_rel = t_e @ R_inv.T + t_inv
    return R_rel, t_rel


def _residual_jacobian_batch(pixels: np.ndarray, rhos: np.ndarray,
                             R_rel: np.ndarray, t_rel: np.ndarray,
                             obs: StereoObservation, rig: StereoRig,
                             patch: PatchConfig, with_jacobian: bool = True,
                             with_samples: bool = False):
    """Temporal residuals (and d/d rho) for a batch of events, (E, side^2).

    Patches translate rigidly with their warped centers.  Pixels that fall
    off either surface, or events whose center is unprojectable, are masked.
    """
    E = len(rhos)
    du, dv = patch.offsets()
    n = len(du)
    cam_l, cam_r = rig.left, rig.right
    m = bearing(cam_l, pixels)                       # (E, 3)
    Rm1 = np.einsum("nij,nj->ni", R_rel, m)          # (E, 3)
    R_rl = rig.T_right_left.R
    t_rl = rig.T_right_left.t
    Rm2 = Rm1 @ R_rl.T

    inv_rho = 1.0 / rhos
    P1 = Rm1 * inv_rho[:, None] + t_rel
    P2 = Rm2 * inv_rho[:, None] + (t_rel @ R_rl.T + t_rl)

    ok_center = (P1[:, 2] > _Z_EPS) & (P2[:, 2] > _Z_EPS)
    z1 = np.where(ok_center, P1[:, 2], 1.0)
    z2 = np.where(ok_center, P2[:, 2], 1.0)
    x1u = cam_l.cx + cam_l.fx * P1[:, 0] / z1
    x1v = cam_l.cy + cam_l.fy * P1[:, 1] / z1
    x2u = cam_r.cx + cam_r.fx * P2[:, 0] / z2
    x2v = cam_r.cy + cam_r.fy * P2[:, 1] / z2

    pu1 = x1u[:, None] + du[None, :]
    pv1 = x1v[:, None] + dv[None, :]
    pu2 = x2u[:, None] + du[None, :]
    pv2 = x2v[:, None] + dv[None, :]

    v1, g1x, g1y, ok1 = bilinear_with_gradient(obs.ts_left.values, pu1, pv1)
    v2, g2x, g2y, ok2 = bilinear_with_gradient(obs.ts_right.values, pu2, pv2)
    valid = ok1 & ok2 & ok_center[:, None]
    r = np.where(valid, v1 - v2, 0.0)
    if not with_jacobian:
        if with_samples:
            return r, valid, None, (v1, v2)
        return r, valid, None

    # d pixel / d rho through P(rho) = R m / rho + t: dP/drho = -R m / rho^2.
    dP = -inv_rho * inv_rho
    J1 = projection_jacobian(cam_l, P1)
    J2 = projection_jacobian(cam_r, P2)
    dx1 = np.einsum("nij,nj->ni", J1, Rm1) * dP[:, None]   # (E, 2)
    dx2 = np.einsum("nij,nj->ni", J2, Rm2) * dP[:, None]
    J = (g1x * dx1[:, 0:1] + g1y * dx1[:, 1:2]
         - g2x * dx2[:, 0:1] - g2y * dx2[:, 1:2])
    J = np.where(valid, J, 0.0)
    return r, valid, J


def _single_event_setup(event, T_ct_cte: SE3):
    ev = as_event_array(event)
    pixels = np.array([[float(ev["x"][0]), float(ev["y"][0])]])
    R_rel = T_ct_cte.R[None, :, :]
    t_rel = T_ct_cte.t[None, :]
    return ev, pixels, R_rel, t_rel


def residual_vector(event, rho: float, obs: StereoObservation, T_ct_cte: SE3,
                    rig: StereoRig, patch: PatchConfig):
    """Signed per-pixel temporal residuals over the patch, with validity mask."""
    _, pixels, R_rel, t_rel = _single_event_setup(event, T_ct_cte)
    r, valid, _ = _residual_jacobian_batch(pixels, np.asarray([rho]), R_rel, t_rel,
                                           obs, rig, patch, with_jacobian=False)
    if valid[0].sum() < valid.shape[1] / 2:
        raise ValueError("insufficient support: patch mostly off-image")
    return r[0], valid[0]


def depth_jacobian(event, rho: float, obs: StereoObservation, T_ct_cte: SE3,
                   rig: StereoRig, patch: PatchConfig):
    """d(residual)/d(inverse depth) per patch pixel, chain rule through both warps."""
    _, pixels, R_rel, t_rel = _single_event_setup(event, T_ct_cte)
    r, valid, J = _residual_jacobian_batch(pixels, np.asarray([rho]), R_rel, t_rel,
                                           obs, rig, patch)
    if valid[0].sum() < valid.shape[1] / 2:
        raise ValueError("insufficient support: patch mostly off-image")
    return J[0], valid[0]


def _patch_index_grid(patch: PatchConfig, width: int):
    du, dv = patch.offsets()
    return (dv.astype(np.int64) * width + du.astype(np.int64))


def init_inverse_depth_batch(pixels: np.ndarray, obs: StereoObservation,
                             rig: StereoRig, disparity_range=DISPARITY_RANGE_DEFAULT,
                             patch: PatchConfig = PatchConfig(),
                             zncc_threshold: float = ZNCC_THRESHOLD_DEFAULT):
    """ZNCC block matching along horizontal epipolar lines, integer disparities.

    pixels: (E, 2) integer event coordinates on the left surface.
    Returns (rho0, ok): inverse depth seeds and a success mask.
    """
    rig.check_rectified()
    d_min, d_max = int(disparity_range[0]), int(disparity_range[1])
    if d_min < 0 or d_max < d_min:
        raise ValueError("invalid disparity range")
    h, w = obs.ts_left.values.shape
    r = patch.radius
    E = len(pixels)
    xs = pixels[:, 0].astype(np.int64)
    ys = pixels[:, 1].astype(np.int64)
    rho0 = np.zeros(E)
    ok = np.zeros(E, dtype=bool)

    in_left = (xs >= r) & (xs < w - r) & (ys >= r) & (ys < h - r)
    if not in_left.any():
        return rho0, ok
    rel = _patch_index_grid(patch, w)
    left_flat = obs.ts_left.values.ravel()
    right_flat = obs.ts_right.values.ravel()
    base = ys * w + xs
    lp = left_flat[base[in_left, None] + rel[None, :]]
    lp = lp - lp.mean(axis=1, keepdims=True)
    l_norm = np.linalg.norm(lp, axis=1)
    usable = l_norm > 1e-9

    best = np.full(lp.shape[0], -np.inf)
    best_d = np.zeros(lp.shape[0], dtype=np.int64)
    xs_in = xs[in_left]
    for d in range(d_min, d_max + 1):
        feasible = usable & (xs_in - d >= r)
        if not feasible.any():
            continue
        rp = right_flat[(base[in_left] - d)[feasible, None] + rel[None, :]]
        rp = rp - rp.mean(axis=1, keepdims=True)
        r_norm = np.linalg.norm(rp, axis=1)
        score = np.full(feasible.sum(), -np.inf)
        nz = r_norm > 1e-9
        score[nz] = np.einsum("ij,ij->i", lp[feasible][nz], rp[nz]) / (
            l_norm[feasible][nz] * r_norm[nz])
        idx = np.flatnonzero(feasible)
        better = score > best[idx]
        best[idx[better]] = score[better]
        best_d[idx[better]] = d

    accepted = best >= zncc_threshold
    rho_seed = best_d / (rig.left.fx * rig.baseline)
    out_idx = np.flatnonzero(in_left)
    rho0[out_idx[accepted]] = rho_seed[accepted]
    ok[out_idx[accepted]] = True
    return rho0, ok


def _bounded_disparity_range(rig: StereoRig, disparity_range, rho_min, rho_max):
    """Intersect the disparity sweep with the inverse depth search interval,
    which bounds the whole estimation along the viewing ray."""
    fxb = rig.left.fx * rig.baseline
    lo = max(int(disparity_range[0]), int(math.ceil(rho_min * fxb - 1e-9)))
    hi = min(int(disparity_range[1]), int(math.floor(rho_max * fxb + 1e-9)))
    return lo, max(lo, hi)


def init_inverse_depth(event_pixel, obs: StereoObservation, rig: StereoRig,
                       disparity_range=DISPARITY_RANGE_DEFAULT,
                       patch: PatchConfig = PatchConfig(),
                       zncc_threshold: float = ZNCC_THRESHOLD_DEFAULT) -> float | None:
    """Seed inverse depth for one event; None when no acceptable match exists."""
    pixels = np.asarray([[event_pixel[0], event_pixel[1]]])
    rho0, ok = init_inverse_depth_batch(pixels, obs, rig, disparity_range, patch,
                                        zncc_threshold)
    return float(rho0[0]) if ok[0] else None


def refine_inverse_depth_batch(pixels: np.ndarray, rho0: np.ndarray,
                               R_rel: np.ndarray, t_rel: np.ndarray,
                               obs: StereoObservation, rig: StereoRig,
                               patch: PatchConfig, model: ResidualModel,
                               rho_min: float = RHO_MIN_DEFAULT,
                               rho_max: float = RHO_MAX_DEFAULT,
                               max_iterations: int = MAX_ITERATIONS_DEFAULT,
                               use_t_weights: bool = True):
    """Gauss-Newton / IRLS refinement of a batch of inverse depth seeds.

    Returns a dict of arrays: rho, j_norm (unweighted, over valid pixels),
    iterations, status.  Events keep iterating until the step falls below
    1e-6 * max(rho, rho_min) or the iteration cap is reached.
    """
    E = len(rho0)
    rho = np.clip(rho0.astype(np.float64).copy(), rho_min, rho_max)
    status = np.full(E, STATUS_OK, dtype=np.int8)
    iterations = np.zeros(E, dtype=np.int32)
    active = np.ones(E, dtype=bool)
    half_patch = patch.side * patch.side / 2.0

    for _ in range(max_iterations):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        r, valid, J = _residual_jacobian_batch(pixels[idx], rho[idx], R_rel[idx],
                                               t_rel[idx], obs, rig, patch)
        n_valid = valid.sum(axis=1)
        bad_support = n_valid < half_patch
        w = model.weights(r) if use_t_weights else np.ones_like(r)
        w = np.where(valid, w, 0.0)
        den = np.einsum("ij,ij->i", w * J, J)
        num = np.einsum("ij,ij->i", w * J, r)
        unobservable = ~bad_support & (den <= 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            step = -num / den
        solvable = ~bad_support & ~unobservable
        step = np.where(solvable, step, 0.0)
        new_rho = rho[idx] + step
        diverged = solvable & ((new_rho < rho_min) | (new_rho > rho_max))

        status[idx[bad_support]] = STATUS_INSUFFICIENT
        status[idx[unobservable]] = STATUS_UNOBSERVABLE
        status[idx[diverged]] = STATUS_DIVERGED
        ok = solvable & ~diverged
        rho[idx[ok]] = new_rho[ok]
        iterations[idx] += 1
        converged = ok & (np.abs(step) < STEP_TOL_FACTOR * np.maximum(new_rho, rho_min))
        active[idx[~ok | converged]] = False

    # Final evaluation at the converged depth for the uncertainty propagation.
    j_norm = np.zeros(E)
    good = status == STATUS_OK
    if good.any():
        idx = np.flatnonzero(good)
        _, valid, J = _residual_jacobian_batch(pixels[idx], rho[idx], R_rel[idx],
                                               t_rel[idx], obs, rig, patch)
        j_norm[idx] = np.sqrt(np.einsum("ij,ij->i", J, J))
        n_valid = valid.sum(axis=1)
        weak = (j_norm[idx] <= 0.0) | (n_valid < half_patch)
        status[idx[weak]] = STATUS_UNOBSERVABLE
    return {"rho": rho, "j_norm": j_norm, "iterations": iterations, "status": status}


def estimate_inverse_depth(event, obs: StereoObservation, T_ct_cte: SE3,
                           rig: StereoRig, patch: PatchConfig,
                           model: ResidualModel, *, rho0: float | None = None,
                           rho_min: float = RHO_MIN_DEFAULT,
                           rho_max: float = RHO_MAX_DEFAULT,
                           max_iterations: int = MAX_ITERATIONS_DEFAULT,
                           use_t_weights: bool = True,
                           zncc_threshold: float = ZNCC_THRESHOLD_DEFAULT,
                           disparity_range=DISPARITY_RANGE_DEFAULT
                           ) -> InverseDepthEstimate | None:
    """Full per-event inverse depth estimation: ZNCC seed, IRLS refinement,
    Student's-t uncertainty.  Returns None when block matching fails."""
    ev, pixels, R_rel, t_rel = _single_event_setup(event, T_ct_cte)
    if rho0 is None:
        d_range = _bounded_disparity_range(rig, disparity_range, rho_min, rho_max)
        rho0 = init_inverse_depth((pixels[0, 0], pixels[0, 1]), obs, rig,
                                  d_range, patch, zncc_threshold)
        if rho0 is None:
            return None
    out = refine_inverse_depth_batch(pixels, np.asarray([float(rho0)]), R_rel, t_rel,
                                     obs, rig, patch, model, rho_min, rho_max,
                                     max_iterations, use_t_weights)
    code = int(out["status"][0])
    if code == STATUS_INSUFFICIENT:
        raise ValueError("insufficient support: patch mostly off-image")
    if code == STATUS_UNOBSERVABLE:
        raise ValueError("unobservable depth: zero Jacobian")
    if code == STATUS_DIVERGED:
        raise ValueError("diverged: left the inverse depth search interval")
    s2, nu = estimate_uncertainty(float(out["rho"][0]), float(out["j_norm"][0]), model)
    return InverseDepthEstimate(mu=float(out["rho"][0]), s=math.sqrt(s2), nu=nu,
                                pixel=(float(pixels[0, 0]), float(pixels[0, 1])),
                                t=float(ev["t"][0]))


def estimate_uncertainty(rho_star: float, J, model: ResidualModel) -> tuple[float, float]:
    """Scale^2 and dof of the inverse depth distribution: s_r^2/|J|^2, nu_r."""
    j_norm = float(np.linalg.norm(np.atleast_1d(np.asarray(J, dtype=np.float64))))
    if j_norm == 0.0:
        raise ValueError("unobservable depth: zero Jacobian")
    return model.s * model.s / (j_norm * j_norm), model.nu


def fit_residual_model(samples: np.ndarray) -> ResidualModel:
    """Maximum-likelihood Student's-t fit of residual samples.

    The fitted density must explain the data at least as well as a Gaussian;
    heavy tails make that hold on real residual populations.
    """
    samples = np.asarray(samples, dtype=np.float64).ravel()
    if len(samples) < 1000:
        raise ValueError("need at least 1000 residual samples")
    if np.ptp(samples) == 0.0:
        raise ValueError("zero spread: residual samples are all equal")
    nu, mu, s = stats.t.fit(samples)
    return ResidualModel(mu=float(mu), s=float(s), nu=float(nu))


def t_fit_nll(samples: np.ndarray, model: ResidualModel) -> float:
    return float(-stats.t.logpdf(samples, model.nu, loc=model.mu, scale=model.s).sum())


def gaussian_fit_nll(samples: np.ndarray) -> float:
    loc, scale = stats.norm.fit(samples)
    return float(-stats.norm.logpdf(samples, loc=loc, scale=scale).sum())


def filter_update(prior: tuple[float, float, float],
                  meas: tuple[float, float, float]) -> tuple[float, float, float]:
    """Student's-t filter: approximate posterior of two t distributions.

    nu' = min(nu_a, nu_b); the posterior mean is the scale-weighted average,
    the posterior scale shrinks and widens with the mean disagreement, and
    the posterior dof is nu' + 1.
    """
    mu_a, s_a, nu_a = prior
    mu_b, s_b, nu_b = meas
    if s_a <= 0.0 or s_b <= 0.0:
        raise ValueError("filter update requires positive scales")
    nu_p = min(nu_a, nu_b)
    s2_sum = s_a * s_a + s_b * s_b
    mu = (s_a * s_a * mu_b + s_b * s_b * mu_a) / s2_sum
    d2 = (mu_a - mu_b) ** 2 / s2_sum
    s2 = (nu_p + d2) / (nu_p + 1.0) * (s_a * s_a * s_b * s_b) / s2_sum
    return mu, math.sqrt(s2), nu_p + 1.0


def propagate_estimate(e: InverseDepthEstimate, T_target_source: SE3,
                       cam: CameraModel):
    """Carry an estimate to another camera frame.

    The mean ray point is transformed; the scale follows the affine-closure
    of the t distribution with the local d(rho_new)/d(rho_old) factor.
    Returns (pixel_float, estimate) or None when the point leaves the view.
    """
    m = bearing(cam, np.asarray(e.pixel, dtype=np.float64))
    P_new = T_target_source.apply(m / e.mu)
    z = P_new[2]
    if z <= _Z_EPS:
        return None
    u = cam.cx + cam.fx * P_new[0] / z
    v = cam.cy + cam.fy * P_new[1] / z
    if not (0.0 <= u <= cam.width - 1 and 0.0 <= v <= cam.height - 1):
        return None
    mu_new = 1.0 / z
    a = float(T_target_source.R[2] @ m)
    scale_factor = abs(a) * (mu_new * mu_new) / (e.mu * e.mu)
    if scale_factor <= 0.0:
        return None
    est = InverseDepthEstimate(mu=mu_new, s=e.s * scale_factor, nu=e.nu,
                               pixel=(float(u), float(v)), t=e.t)
    return (float(u), float(v)), est


def _compatible(mu_a: float, mu_b: float, s_b: float, nu_b: float) -> bool:
    sigma_b = s_b * math.sqrt(nu_b / (nu_b - 2.0))
    return mu_b - 2.0 * sigma_b <= mu_a <= mu_b + 2.0 * sigma_b


def fuse_into_map(depth_map: SemiDenseDepthMap, pixel_float,
                  e: InverseDepthEstimate) -> SemiDenseDepthMap:
    """Blend an estimate into the four nearest map pixels.

    Empty pixel: assign.  Compatible hypothesis (within two standard
    deviations of the incumbent): t-filter update.  Otherwise the hypothesis
    with the smaller variance survives; exact ties keep the incumbent.
    """
    u, v = float(pixel_float[0]), float(pixel_float[1])
    x0 = math.floor(u)
    y0 = math.floor(v)
    for yi in (y0, y0 + 1):
        for xi in (x0, x0 + 1):
            if not (0 <= xi < depth_map.width and 0 <= yi < depth_map.height):
                continue
            mu_b = depth_map.mu[yi, xi]
            if math.isnan(mu_b):
                depth_map.mu[yi, xi] = e.mu
                depth_map.s[yi, xi] = e.s
                depth_map.nu[yi, xi] = e.nu
                depth_map.n_assigned += 1
                continue
            s_b = depth_map.s[yi, xi]
            nu_b = depth_map.nu[yi, xi]
            if _compatible(e.mu, mu_b, s_b, nu_b):
                mu, s, nu = filter_update((mu_b, s_b, nu_b), (e.mu, e.s, e.nu))
                depth_map.mu[yi, xi] = mu
                depth_map.s[yi, xi] = s
                depth_map.nu[yi, xi] = nu
                depth_map.n_fused += 1
            else:
                var_b = nu_b / (nu_b - 2.0) * s_b * s_b if nu_b > 2.0 else np.inf
                var_a = e.nu / (e.nu - 2.0) * e.s * e.s if e.nu > 2.0 else np.inf
                if var_a < var_b:
                    depth_map.mu[yi, xi] = e.mu
                    depth_map.s[yi, xi] = e.s
                    depth_map.nu[yi, xi] = e.nu
                    depth_map.n_replaced += 1
                else:
                    depth_map.n_kept += 1
    return depth_map


def _estimate_observation_batch(events: np.ndarray, obs: StereoObservation,
                                traj: TrajectoryDB, rig: StereoRig,
                                config: MapperConfig, model: ResidualModel):
    """Seeds plus refinement for all events of one observation; returns arrays
    (pixels, rho, j_norm, t_event) of the successful estimates."""
    if len(events) == 0:
        return None
    pixels = np.stack([events["x"], events["y"]], axis=1).astype(np.float64)
    d_range = _bounded_disparity_range(rig, config.disparity_range,
                                       config.rho_min, config.rho_max)
    rho0, ok = init_inverse_depth_batch(pixels, obs, rig, d_range,
                                        config.patch, config.zncc_threshold)
    if not ok.any():
        return None
    pixels = pixels[ok]
    t_events = events["t"][ok]
    R_rel, t_rel = _event_motions(traj, obs.t, t_events)

    def run(sl):
        return refine_inverse_depth_batch(
            pixels[sl], np.clip(rho0[ok][sl], config.rho_min, config.rho_max),
            R_rel[sl], t_rel[sl], obs, rig, config.patch, model,
            config.rho_min, config.rho_max, config.max_iterations,
            config.use_t_weights)

    if config.workers > 1 and len(pixels) >= 2 * config.workers:
        chunks = np.array_split(np.arange(len(pixels)), config.workers)
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            outs = list(pool.map(run, chunks))
        out = {k: np.concatenate([o[k] for o in outs]) for k in outs[0]}
    else:
        out = run(slice(None))
    good = out["status"] == STATUS_OK
    if not good.any():
        return None
    return {"pixels": pixels[good], "rho": out["rho"][good],
            "j_norm": out["j_norm"][good], "t": t_events[good]}


def _propagate_batch(batch: dict, model: ResidualModel, traj: TrajectoryDB,
                     pose_target: SE3, t_target: float, cam: CameraModel):
    """Vectorized propagate_estimate for one estimate batch; returns arrays
    (u, v, mu, s, nu) of the estimates that stay in view."""
    R_rel, t_rel = _event_motions(traj, t_target, batch["t"], pose_obs=pose_target)
    m = bearing(cam, batch["pixels"])
    mu_old = batch["rho"]
    s_old = model.s / batch["j_norm"]
    P = np.einsum("nij,nj->ni", R_rel, m) / mu_old[:, None] + t_rel
    z = P[:, 2]
    ok = z > _Z_EPS
    zs = np.where(ok, z, 1.0)
    u = cam.cx + cam.fx * P[:, 0] / zs
    v = cam.cy + cam.fy * P[:, 1] / zs
    ok &= (u >= 0.0) & (u <= cam.width - 1) & (v >= 0.0) & (v <= cam.height - 1)
    mu_new = 1.0 / zs
    a = np.einsum("nj,nj->n", R_rel[:, 2, :], m)
    factor = np.abs(a) * mu_new * mu_new / (mu_old * mu_old)
    ok &= factor > 0.0
    return (u[ok], v[ok], mu_new[ok], s_old[ok] * factor[ok],
            np.full(ok.sum(), model.nu))


def _fuse_arrays(depth_map: SemiDenseDepthMap, us, vs, mus, ss, nus) -> None:
    """Sequential-equivalent vectorized fusion of many estimates.

    Estimates are spread to their four neighbor pixels, then folded in waves:
    wave k applies the k-th hypothesis arriving at each pixel, so pixels are
    touched in arrival order while each wave runs vectorized.
    """
    if len(us) == 0:
        return
    w, h = depth_map.width, depth_map.height
    x0 = np.floor(us).astype(np.int64)
    y0 = np.floor(vs).astype(np.int64)
    px = np.concatenate([x0, x0 + 1, x0, x0 + 1])
    py = np.concatenate([y0, y0, y0 + 1, y0 + 1])
    order_key = np.tile(np.arange(len(us)), 4)
    mu_a = np.tile(mus, 4)
    s_a = np.tile(ss, 4)
    nu_a = np.tile(nus, 4)
    inb = (px >= 0) & (px < w) & (py >= 0) & (py < h)
    px, py = px[inb], py[inb]
    order_key, mu_a, s_a, nu_a = order_key[inb], mu_a[inb], s_a[inb], nu_a[inb]

    pid = py * w + px
    sort_idx = np.lexsort((order_key, pid))
    pid_s = pid[sort_idx]
    first = np.concatenate([[True], pid_s[1:] != pid_s[:-1]])
    group_start = np.maximum.accumulate(np.where(first, np.arange(len(pid_s)), 0))
    wave = np.arange(len(pid_s)) - group_start

    mu_grid = depth_map.mu.ravel()
    s_grid = depth_map.s.ravel()
    nu_grid = depth_map.nu.ravel()
    for k in range(int(wave.max()) + 1):
        sel = sort_idx[wave == k]
        ids = pid[sel]
        mu_b = mu_grid[ids]
        s_b = s_grid[ids]
        nu_b = nu_grid[ids]
        a_mu, a_s, a_nu = mu_a[sel], s_a[sel], nu_a[sel]

        empty = np.isnan(mu_b)
        with np.errstate(invalid="ignore"):
            sigma_b = s_b * np.sqrt(nu_b / (nu_b - 2.0))
            compat = ~empty & (np.abs(a_mu - mu_b) <= 2.0 * sigma_b)
            var_b = np.where(nu_b > 2.0, nu_b / (nu_b - 2.0) * s_b * s_b, np.inf)
            var_a = np.where(a_nu > 2.0, a_nu / (a_nu - 2.0) * a_s * a_s, np.inf)
        replace = ~empty & ~compat & (var_a < var_b)
        keep = ~empty & ~compat & ~replace

        nu_p = np.minimum(nu_b, a_nu)
        s2_sum = s_b * s_b + a_s * a_s
        f_mu = (s_b * s_b * a_mu + a_s * a_s * mu_b) / s2_sum
        d2 = (mu_b - a_mu) ** 2 / s2_sum
        f_s = np.sqrt((nu_p + d2) / (nu_p + 1.0) * (s_b * s_b * a_s * a_s) / s2_sum)
        f_nu = nu_p + 1.0

        new_mu = np.where(empty | replace, a_mu, np.where(compat, f_mu, mu_b))
        new_s = np.where(empty | replace, a_s, np.where(compat, f_s, s_b))
        new_nu = np.where(empty | replace, a_nu, np.where(compat, f_nu, nu_b))
        mu_grid[ids] = new_mu
        s_grid[ids] = new_s
        nu_grid[ids] = new_nu
        depth_map.n_assigned += int(empty.sum())
        depth_map.n_fused += int(compat.sum())
        depth_map.n_replaced += int(replace.sum())
        depth_map.n_kept += int(keep.sum())
    depth_map.mu = mu_grid.reshape(h, w)
    depth_map.s = s_grid.reshape(h, w)
    depth_map.nu = nu_grid.reshape(h, w)


def build_depth_map(events, obs_history: list[StereoObservation],
                    traj: TrajectoryDB, rig: StereoRig,
                    patch: PatchConfig = PatchConfig(),
                    model: ResidualModel = ResidualModel(),
                    config: MapperConfig | None = None) -> SemiDenseDepthMap:
    """Estimate depth for the given events across a window of stereo
    observations and fuse everything at the newest observation time.

    Each event is estimated against the first observation at or after its
    timestamp (the last one for trailing events); converged estimates are
    propagated to the newest observation and fused four-neighbor-wise.
    """
    if not obs_history:
        raise ValueError("need at least one stereo observation")
    if config is None:
        config = MapperConfig(patch=patch)
    events = as_event_array(events)
    obs_times = np.asarray([o.t for o in obs_history])
    if np.any(np.diff(obs_times) <= 0.0):
        raise ValueError("observations must be time-ordered")
    t_new = obs_times[-1]
    pose_new = traj.interpolate(t_new)
    cam = rig.left
    depth_map = SemiDenseDepthMap(cam.width, cam.height, t_new, pose_new)

    groups = np.clip(np.searchsorted(obs_times, events["t"], side="left"),
                     0, len(obs_history) - 1)
    produced = 0
    for j, obs in enumerate(obs_history):
        batch_events = events[groups == j]
        if len(batch_events) == 0:
            continue
        batch = _estimate_observation_batch(batch_events, obs, traj, rig, config, model)
        if batch is None:
            continue
        produced += len(batch["rho"])
        us, vs, mus, ss, nus = _propagate_batch(batch, model, traj, pose_new,
                                                t_new, cam)
        _fuse_arrays(depth_map, us, vs, mus, ss, nus)
    if produced == 0 or depth_map.n_valid() == 0:
        raise ValueError("empty map: no estimates converged")
    return depth_map


def harvest_residuals(events, obs: StereoObservation, traj: TrajectoryDB,
                      rig: StereoRig, patch: PatchConfig,
                      rho_true: np.ndarray, activity_floor: float = 1.0
                      ) -> np.ndarray:
    """Temporal residuals evaluated at known inverse depths; feeds the
    residual-model fit.

    Patch pixels where both surfaces have decayed below `activity_floor`
    carry no temporal information; keeping them buries the distribution
    under a spike at zero, so they are dropped.
    """
    events = as_event_array(events)
    ok = np.isfinite(rho_true) & (rho_true > 0.0)
    events = events[ok]
    rho_true = rho_true[ok]
    pixels = np.stack([events["x"], events["y"]], axis=1).astype(np.float64)
    R_rel, t_rel = _event_motions(traj, obs.t, events["t"])
    r, valid, _, samples = _residual_jacobian_batch(pixels, rho_true, R_rel, t_rel,
                                                    obs, rig, patch,
                                                    with_jacobian=False,
                                                    with_samples=True)
    keep = valid & (np.maximum(samples[0], samples[1]) >= activity_floor)
    return r[keep]


def write_float_map(path, t: float, grid: np.ndarray) -> None:
    """Portable float map: one "width height t" header line, then row-major
    values (NaN for empty pixels), one row per line."""
    h, w = grid.shape
    with open(path, "w") as fh:
        fh.write(f"{w} {h} {float(t)!r}\n")
        for row in grid:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def read_float_map(path) -> tuple[float, np.ndarray]:
    with open(path, "r") as fh:
        header = fh.readline().split()
        if len(header) != 3:
            raise ValueError("malformed float-map header")
        w, h, t = int(header[0]), int(header[1]), float(header[2])
        grid = np.loadtxt(fh, dtype=np.float64, ndmin=2)
    if grid.shape != (h, w):
        raise ValueError(f"float-map body {grid.shape} does not match header {(h, w)}")
    return t, grid


def save_depth_map(depth_map: SemiDenseDepthMap, mu_path, sigma_path) -> None:
    write_float_map(mu_path, depth_map.t, depth_map.mu)
    write_float_map(sigma_path, depth_map.t, depth_map.sigma_grid())


def save_point_cloud_ply(points: np.ndarray, path) -> None:
    """ASCII PLY with double precision x y z vertices."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(points)}",
             "property double x", "property double y", "property double z",
             "end_header"]
    lines += [f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r}" for p in points]
    Path(path).write_text("\n".join(lines) + "\n")


def load_point_cloud_ply(path) -> np.ndarray:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != "ply":
        raise ValueError("not a PLY file")
    try:
        header_end = lines.index("end_header")
    except ValueError:
        raise ValueError("PLY missing end_header") from None
    n = 0
    for line in lines[:header_end]:
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
    body = lines[header_end + 1:header_end + 1 + n]
    if len(body) != n:
        raise ValueError("PLY vertex count mismatch")
    if n == 0:
        return np.empty((0, 3))
    return np.asarray([[float(v) for v in line.split()] for line in body])
