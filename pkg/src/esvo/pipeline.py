"""End-to-end orchestration: surfaces at a fixed rate, interleaved tracking
and mapping, bootstrap, outputs, and trajectory evaluation (ATE / RPE)."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import (
    SE3,
    StereoRig,
    TrajectoryDB,
    cayley_from_se3,
    load_calibration,
    load_trajectory,
    save_trajectory,
)
from .mapping import (
    MapperConfig,
    PatchConfig,
    ResidualModel,
    SemiDenseDepthMap,
    StereoObservation,
    _bounded_disparity_range,
    _estimate_observation_batch,
    _fuse_arrays,
    _propagate_batch,
    _residual_jacobian_batch,
    init_inverse_depth_batch,
    save_depth_map,
    save_point_cloud_ply,
)
from .time_surface import (
    EVENT_DTYPE,
    LastEventMap,
    SurfaceHistory,
    blur,
    iter_event_batches,
    negative,
    render,
)
from .tracking import TrackerConfig, TrackingProblem, track

log = logging.getLogger(__name__)

ACTIVE_PIXEL_THRESHOLD = 32.0  # surface value above which a pixel counts as active


@dataclass
class SystemConfig:
    """Every knob of the run loop; mirrored one-to-one by the config file."""

    eta: float = 0.030
    surface_rate: float = 100.0
    mapping_rate: float = 20.0
    fusion_window: int = 20
    event_budget: int = 1000
    event_pool: int = 10000
    blur_kernel: int = 5
    # tracker
    tracker_batch_size: int = 300
    tracker_max_iterations: int = 5
    huber_delta: float = 10.0
    lm_lambda0: float = 1e-3
    tracker_seed: int = 0
    # mapper
    patch_size: int = 25
    rho_min: float = 0.1
    rho_max: float = 1.0 / 0.3
    zncc_threshold: float = 0.7
    disparity_min: int = 0
    disparity_max: int = 60
    mapper_max_iterations: int = 10
    use_t_weights: bool = True
    mapper_seed: int = 0
    workers: int = 1
    residual_mu: float = 0.0
    residual_s: float = 10.122
    residual_nu: float = 2.207
    # bootstrap / reinitialization
    bootstrap_min_active: int = 500
    reinit_failures: int = 10
    # paths
    events_left: str = ""
    events_right: str = ""
    calibration: str = ""
    output_dir: str = ""
    gt_poses: str = ""
    map_save_stride: int = 10

    def __post_init__(self) -> None:
        if self.surface_rate <= 0 or self.mapping_rate <= 0:
            raise ValueError("rates must be positive")
        if self.fusion_window < 1:
            raise ValueError("fusion window must cover at least one observation")

    def tracker_config(self) -> TrackerConfig:
        return TrackerConfig(batch_size=self.tracker_batch_size,
                             max_iterations=self.tracker_max_iterations,
                             huber_delta=self.huber_delta,
                             lm_lambda0=self.lm_lambda0, seed=self.tracker_seed)

    def mapper_config(self) -> MapperConfig:
        return MapperConfig(patch=PatchConfig(self.patch_size),
                            rho_min=self.rho_min, rho_max=self.rho_max,
                            zncc_threshold=self.zncc_threshold,
                            disparity_range=(self.disparity_min, self.disparity_max),
                            max_iterations=self.mapper_max_iterations,
                            use_t_weights=self.use_t_weights,
                            event_budget=self.event_budget,
                            event_pool=self.event_pool,
                            seed=self.mapper_seed, workers=self.workers)

    def residual_model(self) -> ResidualModel:
        return ResidualModel(mu=self.residual_mu, s=self.residual_s,
                             nu=self.residual_nu)


_CONFIG_FIELDS = {f.name: f.type for f in dataclasses.fields(SystemConfig)}


def load_system_config(path) -> SystemConfig:
    """Parse a key=value config file; every key must be a SystemConfig field."""
    values = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"malformed config line: {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        if key not in _CONFIG_FIELDS:
            raise ValueError(f"unknown config key: {key}")
        values[key] = val
    kwargs = {}
    for key, val in values.items():
        target = SystemConfig.__dataclass_fields__[key].type
        if target == "float":
            kwargs[key] = float(val)
        elif target == "int":
            kwargs[key] = int(val)
        elif target == "bool":
            if val.lower() not in ("true", "false", "0", "1"):
                raise ValueError(f"boolean config key {key} got {val!r}")
            kwargs[key] = val.lower() in ("true", "1")
        else:
            kwargs[key] = val
    return SystemConfig(**kwargs)


def save_system_config(config: SystemConfig, path) -> None:
    lines = []
    for f in dataclasses.fields(SystemConfig):
        value = getattr(config, f.name)
        if isinstance(value, float):
            lines.append(f"{f.name}={value!r}")
        else:
            lines.append(f"{f.name}={value}")
    Path(path).write_text("\n".join(lines) + "\n")


class _EventStream:
    """Streams an event file into a last-event map and a rolling recent pool."""

    def __init__(self, path, width: int, height: int, pool_size: int):
        self._batches = iter_event_batches(path)
        self.map = LastEventMap(width, height)
        self.pool = np.empty(0, dtype=EVENT_DTYPE)
        self._pool_size = pool_size
        self._carry = np.empty(0, dtype=EVENT_DTYPE)
        self._exhausted = False
        self.count = 0

    def advance_to(self, t: float) -> None:
        chunks = []
        if len(self._carry):
            take = self._carry["t"] <= t
            chunks.append(self._carry[take])
            self._carry = self._carry[~take]
        while not len(self._carry) and not self._exhausted:
            try:
                batch = next(self._batches)
            except StopIteration:
                self._exhausted = True
                break
            take = batch["t"] <= t
            chunks.append(batch[take])
            self._carry = batch[~take]
        if chunks:
            new = np.concatenate(chunks)
            if len(new):
                self.map.ingest(new)
                self.count += len(new)
                self.pool = np.concatenate([self.pool, new])[-self._pool_size:]

    @property
    def exhausted(self) -> bool:
        return self._exhausted and len(self._carry) == 0

    def first_timestamp(self) -> float | None:
        if len(self._carry) == 0 and not self._exhausted:
            try:
                self._carry = next(self._batches)
            except StopIteration:
                self._exhausted = True
        return float(self._carry["t"][0]) if len(self._carry) else None


def bootstrap(obs: StereoObservation, rig: StereoRig,
              patch: PatchConfig = PatchConfig(),
              model: ResidualModel = ResidualModel(),
              config: MapperConfig | None = None,
              ref_pose: SE3 = None,
              min_active: int = 500,
              active_threshold: float = ACTIVE_PIXEL_THRESHOLD,
              uncertainty_inflation: float = 5.0) -> SemiDenseDepthMap:
    """Coarse initial map from a dense ZNCC disparity sweep over the active
    left pixels, with an inflated uncertainty so later estimates dominate."""
    if config is None:
        config = MapperConfig(patch=patch)
    if ref_pose is None:
        ref_pose = SE3.identity()
    active = obs.ts_left.values >= active_threshold
    n_active_right = int((obs.ts_right.values >= active_threshold).sum())
    ys, xs = np.nonzero(active)
    if len(ys) < min_active or n_active_right < min_active:
        raise ValueError("cannot bootstrap: too few active pixels")
    pixels = np.stack([xs, ys], axis=1).astype(np.float64)
    d_range = _bounded_disparity_range(rig, config.disparity_range,
                                       config.rho_min, config.rho_max)
    rho0, ok = init_inverse_depth_batch(pixels, obs, rig, d_range, config.patch,
                                        config.zncc_threshold)
    if not ok.any():
        raise ValueError("cannot bootstrap: no stereo matches")
    pixels = pixels[ok]
    rho = np.clip(rho0[ok], config.rho_min, config.rho_max)
    # Events of the bootstrap observation live at the observation time, so
    # the event-to-observation motion is the identity.
    E = len(pixels)
    _, valid, J = _residual_jacobian_batch(
        pixels, rho, np.broadcast_to(np.eye(3), (E, 3, 3)), np.zeros((E, 3)),
        obs, rig, config.patch)
    j_norm = np.sqrt(np.einsum("ij,ij->i", J, J))
    usable = j_norm > 0.0
    depth_map = SemiDenseDepthMap(rig.left.width, rig.left.height, obs.t, ref_pose)
    s = uncertainty_inflation * model.s / j_norm[usable]
    _fuse_arrays(depth_map, pixels[usable, 0], pixels[usable, 1], rho[usable], s,
                 np.full(usable.sum(), model.nu))
    if depth_map.n_valid() == 0:
        raise ValueError("cannot bootstrap: no usable depth")
    return depth_map


@dataclass
class VoResult:
    trajectory: TrajectoryDB
    cloud: np.ndarray
    depth_maps: list
    stats: dict = field(default_factory=dict)


def _map_to_cloud(depth_map: SemiDenseDepthMap, rig: StereoRig) -> np.ndarray:
    pixels, rhos = depth_map.support()
    if len(pixels) == 0:
        return np.empty((0, 3))
    rays = np.stack([(pixels[:, 0] - rig.left.cx) / rig.left.fx,
                     (pixels[:, 1] - rig.left.cy) / rig.left.fy,
                     np.ones(len(pixels))], axis=1)
    return depth_map.ref_pose.apply(rays / rhos[:, None])


def run_vo(config: SystemConfig) -> VoResult:
    """Replay recorded stereo event streams through the full loop.

    Surfaces render at the configured rate; the tracker solves each new
    observation against the latest map; the mapper refreshes the map at its
    own rate by estimating depth for a random batch of recent events and
    fusing the last `fusion_window` batches at the newest observation.  The
    first pose is the identity (gauge freedom).  Deterministic given seeds.
    """
    if not config.events_left or not config.events_right or not config.calibration:
        raise ValueError("config must provide events_left, events_right, calibration")
    rig = load_calibration(config.calibration)
    mapper_cfg = config.mapper_config()
    tracker_cfg = config.tracker_config()
    model = config.residual_model()
    gt_mode = bool(config.gt_poses)
    traj = load_trajectory(config.gt_poses) if gt_mode else TrajectoryDB()

    left = _EventStream(config.events_left, rig.left.width, rig.left.height,
                        config.event_pool)
    right = _EventStream(config.events_right, rig.right.width, rig.right.height,
                         config.event_pool)
    t_first = left.first_timestamp()
    t_first_r = right.first_timestamp()
    if t_first is None or t_first_r is None:
        raise ValueError("cannot bootstrap: empty event files")
    t0 = min(t_first, t_first_r)

    history = SurfaceHistory(maxlen=100)
    mapping_stride = max(1, int(round(config.surface_rate / config.mapping_rate)))
    rng_map = np.random.default_rng(config.mapper_seed)

    depth_map: SemiDenseDepthMap | None = None
    last_fused: SemiDenseDepthMap | None = None
    estimate_batches: list = []
    cloud_parts: list[np.ndarray] = []
    saved_maps: list = []
    last_pose: SE3 | None = None
    consecutive_failures = 0
    stats = {"observations": 0, "tracked": 0, "track_failures": 0, "reinits": 0,
             "mapping_rounds": 0, "events": 0}

    out_dir = Path(config.output_dir) if config.output_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    k = 0
    dt = 1.0 / config.surface_rate
    while True:
        t = t0 + (k + 1) * dt
        left.advance_to(t)
        right.advance_to(t)
        if left.exhausted and right.exhausted and left.map.current_time < t - dt \
                and right.map.current_time < t - dt:
            break
        obs = StereoObservation(render(left.map, t, config.eta),
                                render(right.map, t, config.eta))
        history.append(obs)
        stats["observations"] += 1

        if gt_mode:
            last_pose = traj.interpolate(t)
        elif depth_map is None:
            try:
                depth_map = bootstrap(obs, rig, model=model, config=mapper_cfg,
                                      ref_pose=SE3.identity(),
                                      min_active=config.bootstrap_min_active)
                last_pose = SE3.identity()
                traj.append(t, last_pose)
                stats["tracked"] += 1
                log.info("bootstrapped at t=%.3f with %d pixels", t,
                         depth_map.n_valid())
            except ValueError:
                pass
        else:
            target = blur(negative(obs.ts_left), config.blur_kernel)
            theta0 = cayley_from_se3(last_pose.inverse() @ depth_map.ref_pose)
            problem = TrackingProblem.from_map(depth_map, target, rig.left,
                                               theta0=theta0)
            try:
                result = track(problem, tracker_cfg)
                last_pose = result.pose
                traj.append(t, last_pose)
                stats["tracked"] += 1
                consecutive_failures = 0
            except ValueError as err:
                consecutive_failures += 1
                stats["track_failures"] += 1
                log.warning("tracking failed at t=%.3f: %s", t, err)
                if consecutive_failures > config.reinit_failures:
                    log.warning("reinitializing after %d consecutive failures",
                                consecutive_failures)
                    stats["reinits"] += 1
                    depth_map = None
                    estimate_batches.clear()
                    consecutive_failures = 0

        ready = gt_mode or (depth_map is not None and len(traj) > 0)
        if ready and k % mapping_stride == 0:
            pool = left.pool[left.pool["t"] <= t]
            if len(pool):
                take = min(config.event_budget, len(pool))
                sel = pool[rng_map.choice(len(pool), size=take, replace=False)]
                sel = sel[np.argsort(sel["t"], kind="stable")]
                batch = _estimate_observation_batch(sel, obs, traj, rig,
                                                    mapper_cfg, model)
                if batch is not None:
                    estimate_batches.append(batch)
                    estimate_batches = estimate_batches[-config.fusion_window:]
                if estimate_batches:
                    pose_t = traj.interpolate(t)
                    fused = SemiDenseDepthMap(rig.left.width, rig.left.height, t,
                                              pose_t)
                    for b in estimate_batches:
                        us, vs, mus, ss, nus = _propagate_batch(
                            b, model, traj, pose_t, t, rig.left)
                        _fuse_arrays(fused, us, vs, mus, ss, nus)
                    if fused.n_valid() > 0:
                        if not gt_mode:
                            depth_map = fused
                        last_fused = fused
                        stats["mapping_rounds"] += 1
                        cloud_parts.append(_map_to_cloud(fused, rig))
                        if stats["mapping_rounds"] % config.map_save_stride == 1 \
                                or config.map_save_stride == 1:
                            saved_maps.append((t, fused))
        k += 1

    stats["events"] = left.count + right.count
    if depth_map is None and not gt_mode:
        raise ValueError("cannot bootstrap: never found enough active pixels")
    if last_fused is not None and (not saved_maps or saved_maps[-1][1] is not last_fused):
        saved_maps.append((last_fused.t, last_fused))
    cloud = np.concatenate(cloud_parts) if cloud_parts else np.empty((0, 3))

    if out_dir:
        save_trajectory(traj, out_dir / "trajectory.txt")
        save_point_cloud_ply(cloud, out_dir / "cloud.ply")
        for i, (tm, m) in enumerate(saved_maps):
            save_depth_map(m, out_dir / f"depth_{i:04d}_mu.txt",
                           out_dir / f"depth_{i:04d}_sigma.txt")
    return VoResult(trajectory=traj, cloud=cloud, depth_maps=saved_maps,
                    stats=stats)


def _associate(est: TrajectoryDB, gt: TrajectoryDB, tol: float):
    """Nearest-timestamp association; returns index pairs (est_i, gt_j)."""
    gt_times = gt.timestamps
    pairs = []
    for i, t in enumerate(est.timestamps):
        j = int(np.searchsorted(gt_times, t))
        best = None
        for cand in (j - 1, j):
            if 0 <= cand < len(gt_times) and abs(gt_times[cand] - t) <= tol:
                if best is None or abs(gt_times[cand] - t) < abs(gt_times[best] - t):
                    best = cand
        if best is not None:
            pairs.append((i, best))
    return pairs


def align_trajectories(est_pos: np.ndarray, gt_pos: np.ndarray):
    """Closed-form rigid alignment (rotation via SVD of the cross-covariance)
    mapping est onto gt; returns (R, t)."""
    mu_e = est_pos.mean(axis=0)
    mu_g = gt_pos.mean(axis=0)
    H = (gt_pos - mu_g).T @ (est_pos - mu_e)
    U, _, Vt = np.linalg.svd(H)
    S = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    R = U @ S @ Vt
    t = mu_g - R @ mu_e
    return R, t


def evaluate_ate(est: TrajectoryDB, gt: TrajectoryDB, tol: float = 0.010) -> float:
    """Absolute trajectory error: RMS residual translation after the best
    rigid alignment of temporally associated poses."""
    pairs = _associate(est, gt, tol)
    if len(pairs) < 3:
        raise ValueError("no overlap: fewer than 3 associated poses")
    est_pos = np.asarray([est.pose_at_index(i)[1].t for i, _ in pairs])
    gt_pos = np.asarray([gt.pose_at_index(j)[1].t for _, j in pairs])
    R, t = align_trajectories(est_pos, gt_pos)
    residual = gt_pos - (est_pos @ R.T + t)
    return float(np.sqrt((residual ** 2).sum(axis=1).mean()))


def evaluate_rpe(est: TrajectoryDB, gt: TrajectoryDB, delta: float = 1.0,
                 tol: float = 0.010) -> tuple[float, float]:
    """Relative pose error over intervals of `delta` seconds: RMS rotational
    drift (deg/s) and translational drift (m/s)."""
    pairs = _associate(est, gt, tol)
    if len(pairs) < 2:
        raise ValueError("no overlap: fewer than 2 associated poses")
    est_times = est.timestamps
    rot = []
    trans = []
    pair_times = np.asarray([est_times[i] for i, _ in pairs])
    for a, (i, j) in enumerate(pairs):
        t_target = pair_times[a] + delta
        b = int(np.searchsorted(pair_times, t_target))
        best = None
        for cand in (b - 1, b):
            if 0 <= cand < len(pairs) and abs(pair_times[cand] - t_target) <= tol:
                best = cand
        if best is None or best == a:
            continue
        i2, j2 = pairs[best]
        dt = pair_times[best] - pair_times[a]
        est_rel = est.pose_at_index(i)[1].inverse() @ est.pose_at_index(i2)[1]
        gt_rel = gt.pose_at_index(j)[1].inverse() @ gt.pose_at_index(j2)[1]
        err = gt_rel.inverse() @ est_rel
        rot.append(math.degrees(err.rotation_angle()) / dt)
        trans.append(float(np.linalg.norm(err.t)) / dt)
    if not rot:
        raise ValueError("no overlap: no pose pairs spaced by delta")
    rot = np.asarray(rot)
    trans = np.asarray(trans)
    return float(np.sqrt((rot ** 2).mean())), float(np.sqrt((trans ** 2).mean()))


@dataclass
class EvaluationReport:
    ate_rms: float
    rpe_rot_deg_per_s: float
    rpe_trans_m_per_s: float
    timestamps: np.ndarray = field(repr=False, default=None)
    est_positions: np.ndarray = field(repr=False, default=None)
    gt_positions: np.ndarray = field(repr=False, default=None)


def evaluate(est: TrajectoryDB, gt: TrajectoryDB, rpe_delta: float = 1.0,
             tol: float = 0.010) -> EvaluationReport:
    pairs = _associate(est, gt, tol)
    if len(pairs) < 3:
        raise ValueError("no overlap: fewer than 3 associated poses")
    ate = evaluate_ate(est, gt, tol)
    rpe_rot, rpe_trans = evaluate_rpe(est, gt, rpe_delta, tol)
    times = np.asarray([est.timestamps[i] for i, _ in pairs])
    est_pos = np.asarray([est.pose_at_index(i)[1].t for i, _ in pairs])
    gt_pos = np.asarray([gt.pose_at_index(j)[1].t for _, j in pairs])
    return EvaluationReport(ate_rms=ate, rpe_rot_deg_per_s=rpe_rot,
                            rpe_trans_m_per_s=rpe_trans, timestamps=times,
                            est_positions=est_pos, gt_positions=gt_pos)


def depth_map_metrics(depth_map: SemiDenseDepthMap,
                      gt_inverse_depth: np.ndarray) -> dict:
    """Depth accuracy against a ground-truth inverse depth grid: mean and
    median absolute depth error, and the mean relative to the GT depth range."""
    mask = depth_map.valid_mask() & np.isfinite(gt_inverse_depth)
    if not mask.any():
        raise ValueError("no overlapping depth to evaluate")
    z_est = 1.0 / depth_map.mu[mask]
    z_gt = 1.0 / gt_inverse_depth[mask]
    err = np.abs(z_est - z_gt)
    z_all = 1.0 / gt_inverse_depth[np.isfinite(gt_inverse_depth)]
    depth_range = float(z_all.max() - z_all.min())
    return {"mean": float(err.mean()), "median": float(np.median(err)),
            "relative": float(err.mean() / depth_range) if depth_range > 0 else 0.0,
            "count": int(mask.sum()), "depth_range": depth_range}
