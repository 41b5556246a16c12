"""Synthetic stereo event streams from planar edge scenes.

Ideal DVS model: per-pixel log intensity is rendered at a fixed internal
frame rate, events are emitted wherever the log intensity crosses a level of
the uniform contrast lattice {k * C}, with timestamps linearly interpolated
inside the frame interval.  Ground-truth trajectory and inverse depth come
from the same analytic scene, which makes the generator usable as an oracle
for the mapping and tracking solvers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import SE3, CameraModel, StereoRig, TrajectoryDB
from .time_surface import EVENT_DTYPE, make_events


@dataclass(frozen=True)
class PlaneSpec:
    """Fronto-parallel textured plane at world depth z = depth."""

    depth: float
    pattern: np.ndarray          # bool grid, True = bright cell
    extent: tuple[float, float]  # metric size (ex, ey)
    center: tuple[float, float] = (0.0, 0.0)  # world (x, y) of the plane center
    # Normalized cell boundaries in [0, 1]; irregular spacing desynchronizes
    # edge crossings (a regular lattice fires whole-image event bursts).
    x_edges: np.ndarray | None = None
    y_edges: np.ndarray | None = None
    # In-plane texture rotation. Oblique edges give patches orientation
    # structure, without which stereo matching of edge trails is ambiguous.
    angle: float = 0.0


@dataclass(frozen=True)
class SceneConfig:
    planes: tuple[PlaneSpec, ...]
    bright: float = 0.8
    dark: float = 0.2
    background: float = 0.45

    def __post_init__(self) -> None:
        if not self.planes:
            raise ValueError("scene needs at least one plane")


def _jittered_edges(rng, n: int) -> np.ndarray:
    widths = rng.uniform(0.55, 1.45, n)
    edges = np.concatenate([[0.0], np.cumsum(widths)])
    return edges / edges[-1]


def _make_pattern(rng, depth, fx, ex, ey, cell_px, angle):
    """Random binary cells sized to project near cell_px pixels at `depth`.

    With a nonzero texture angle the tile is a square over the crop's
    diagonal; cell boundaries are jittered either way.
    """
    if angle != 0.0:
        ex = ey = math.hypot(ex, ey)
    nx = max(3, int(round(ex * fx / (depth * cell_px))))
    ny = max(3, int(round(ey * fx / (depth * cell_px))))
    pattern = rng.random((ny, nx)) < 0.5
    return pattern, _jittered_edges(rng, nx), _jittered_edges(rng, ny)


def three_plane_scene(cam: CameraModel, depths=(1.0, 1.5, 2.2), cell_px: float = 13.0,
                      seed: int = 0, margin: float = 1.9,
                      gap: float = 0.16, sweep: float = 0.35) -> SceneConfig:
    """Three textured planes side by side, each filling a horizontal band of
    the field of view at its own depth.

    Bands are separated by angular gaps so the planes never occlude each
    other while the camera sweeps up to `sweep` meters sideways (occlusion
    makes stereo correspondences unobservable, which is not what this scene
    is meant to probe).  `margin` pads the vertical extent for y/z motion.
    """
    rng = np.random.default_rng(seed)
    half_w = (cam.width / 2) / cam.fx
    half_h = (cam.height / 2) / cam.fy
    g = gap / 2
    # Normalized tan-angle bands; depths increase left to right, so a +x sweep
    # only widens the gaps.  Outer edges get the sweep allowance in meters.
    bands = [(-1.0, -1.0 / 3.0 - g), (-1.0 / 3.0 + g, 1.0 / 3.0 - g),
             (1.0 / 3.0 + g, 1.0)]
    angles = (0.32, -0.47, 0.68)
    planes = []
    for k, (depth, (lo, hi)) in enumerate(zip(depths, bands)):
        x_lo = depth * half_w * lo - (sweep if k == 0 else 0.0)
        x_hi = depth * half_w * hi + (sweep if k == len(bands) - 1 else 0.0)
        ex = x_hi - x_lo
        ey = depth * half_h * 2.0 * margin
        cx = 0.5 * (x_lo + x_hi)
        pattern, x_edges, y_edges = _make_pattern(rng, depth, cam.fx, ex, ey,
                                                  cell_px, angles[k % 3])
        planes.append(PlaneSpec(depth=depth, pattern=pattern, extent=(ex, ey),
                                center=(cx, 0.0), x_edges=x_edges, y_edges=y_edges,
                                angle=angles[k % 3]))
    return SceneConfig(planes=tuple(planes))


def single_plane_scene(cam: CameraModel, depth: float = 1.5, cell_px: float = 13.0,
                       seed: int = 0, margin: float = 1.5,
                       angle: float = 0.38) -> SceneConfig:
    rng = np.random.default_rng(seed)
    ex = depth * (cam.width / cam.fx) * margin
    ey = depth * (cam.height / cam.fy) * margin
    pattern, x_edges, y_edges = _make_pattern(rng, depth, cam.fx, ex, ey,
                                              cell_px, angle)
    return SceneConfig(planes=(PlaneSpec(depth, pattern, (ex, ey),
                                         x_edges=x_edges, y_edges=y_edges,
                                         angle=angle),))


@dataclass(frozen=True)
class SimTrajectory:
    """Continuous camera motion over [0, duration]; pose_at gives T_world_cam."""

    kind: str
    duration: float
    speed: float = 0.1            # m/s for translations, rad/s for rotations
    spline_amplitudes: tuple[float, ...] = (0.05, 0.03, 0.04, 0.03, 0.02, 0.04)
    spline_frequency: float = 0.25

    _KINDS = ("translate-x", "translate-y", "translate-z", "rotate-z", "spline")

    def __post_init__(self) -> None:
        if self.kind not in self._KINDS:
            raise ValueError(f"unknown motion primitive {self.kind!r}")
        if self.duration <= 0.0:
            raise ValueError("duration must be positive")

    def pose_at(self, t: float) -> SE3:
        if self.kind == "translate-x":
            return SE3(np.eye(3), [self.speed * t, 0.0, 0.0])
        if self.kind == "translate-y":
            return SE3(np.eye(3), [0.0, self.speed * t, 0.0])
        if self.kind == "translate-z":
            return SE3(np.eye(3), [0.0, 0.0, self.speed * t])
        if self.kind == "rotate-z":
            a = self.speed * t
            c, s = math.cos(a), math.sin(a)
            return SE3([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]], np.zeros(3))
        # Smooth 6-DoF wander: sinusoids per axis, phase-shifted.
        w = 2.0 * math.pi * self.spline_frequency
        ax = self.spline_amplitudes
        trans = [ax[i] * math.sin(w * t + i * 0.9) for i in range(3)]
        rx, ry, rz = (ax[3 + i] * math.sin(w * t + 1.1 * i + 0.4) for i in range(3))
        cx_, sx = math.cos(rx), math.sin(rx)
        cy_, sy = math.cos(ry), math.sin(ry)
        cz, sz = math.cos(rz), math.sin(rz)
        Rx = np.array([[1, 0, 0], [0, cx_, -sx], [0, sx, cx_]])
        Ry = np.array([[cy_, 0, sy], [0, 1, 0], [-sy, 0, cy_]])
        Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
        return SE3(Rz @ Ry @ Rx, trans)


def _ray_grid(cam: CameraModel, supersample: int = 1,
              dtype=np.float64) -> np.ndarray:
    """Unit-depth camera-frame ray directions, shape (H*ss, W*ss, 3)."""
    ss = supersample
    us = (np.arange(cam.width * ss, dtype=dtype) + 0.5) / ss - 0.5
    vs = (np.arange(cam.height * ss, dtype=dtype) + 0.5) / ss - 0.5
    uu, vv = np.meshgrid(us, vs)
    rays = np.empty(uu.shape + (3,), dtype=dtype)
    rays[..., 0] = (uu - cam.cx) / cam.fx
    rays[..., 1] = (vv - cam.cy) / cam.fy
    rays[..., 2] = 1.0
    return rays


def _plane_window(plane: PlaneSpec, pose: SE3, shape, scale_x, scale_y,
                  off_x, off_y):
    """Row/column window of the grid that can see the plane, padded."""
    ex, ey = plane.extent
    corners = np.array([[plane.center[0] + sx * ex / 2, plane.center[1] + sy * ey / 2,
                         plane.depth] for sx in (-1, 1) for sy in (-1, 1)])
    P = pose.inverse().apply(corners)
    if np.any(P[:, 2] <= 1e-9):
        return 0, shape[0], 0, shape[1]
    us = (off_x + scale_x * P[:, 0] / P[:, 2])
    vs = (off_y + scale_y * P[:, 1] / P[:, 2])
    c0 = max(0, int(np.floor(us.min())) - 2)
    c1 = min(shape[1], int(np.ceil(us.max())) + 3)
    r0 = max(0, int(np.floor(vs.min())) - 2)
    r1 = min(shape[0], int(np.ceil(vs.max())) + 3)
    return r0, r1, c0, c1


def _intersect(scene: SceneConfig, pose: SE3, rays_cam: np.ndarray,
               grid_geom=None):
    """Nearest plane hit per ray: returns (intensity, inverse_depth) grids.

    inverse_depth is the camera-frame inverse z of the hit, NaN on background.
    grid_geom = (scale_x, scale_y, off_x, off_y) maps camera rays to grid
    indices and enables per-plane windowing of the computation.
    """
    origin = pose.t
    dtype = rays_cam.dtype
    identity_rot = np.array_equal(pose.R, np.eye(3))
    shape = rays_cam.shape[:-1]
    intensity = np.full(shape, scene.background, dtype=dtype)
    depth = np.full(shape, np.inf, dtype=dtype)
    for plane in scene.planes:
        if abs(plane.depth - origin[2]) < 1e-9:
            raise ValueError("camera lies in a scene plane")
        if grid_geom is not None:
            r0, r1, c0, c1 = _plane_window(plane, pose, shape, *grid_geom)
            if r0 >= r1 or c0 >= c1:
                continue
        else:
            r0, r1, c0, c1 = 0, shape[0], 0, shape[1]
        rays = rays_cam[r0:r1, c0:c1]
        d_world = rays if identity_rot else rays @ pose.R.T.astype(dtype)
        dz = d_world[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (plane.depth - origin[2]) / dz
        depth_win = depth[r0:r1, c0:c1]
        inten_win = intensity[r0:r1, c0:c1]
        hit = (dz > 1e-12) & (s > 0.0) & (s < depth_win)
        if not hit.any():
            continue
        px = origin[0] + s * d_world[..., 0] - plane.center[0]
        py = origin[1] + s * d_world[..., 1] - plane.center[1]
        ex, ey = plane.extent
        inside = hit & (np.abs(px) <= ex / 2) & (np.abs(py) <= ey / 2)
        if not inside.any():
            continue
        ny, nx = plane.pattern.shape
        if plane.angle != 0.0:
            # Texture tile is a square over the crop's diagonal so the
            # rotated lookup never leaves it.
            ca, sa = math.cos(plane.angle), math.sin(plane.angle)
            qx = ca * px + sa * py
            qy = -sa * px + ca * py
            diag = math.hypot(ex, ey)
            fx_norm = (qx + diag / 2) / diag
            fy_norm = (qy + diag / 2) / diag
        else:
            fx_norm = (px + ex / 2) / ex
            fy_norm = (py + ey / 2) / ey
        if plane.x_edges is not None:
            ix = np.clip(np.searchsorted(plane.x_edges, fx_norm, side="right") - 1,
                         0, nx - 1)
        else:
            ix = np.clip((fx_norm * nx).astype(np.int64), 0, nx - 1)
        if plane.y_edges is not None:
            iy = np.clip(np.searchsorted(plane.y_edges, fy_norm, side="right") - 1,
                         0, ny - 1)
        else:
            iy = np.clip((fy_norm * ny).astype(np.int64), 0, ny - 1)
        bright = plane.pattern[iy, ix]
        val = np.where(bright, dtype.type(scene.bright), dtype.type(scene.dark))
        inten_win[...] = np.where(inside, val, inten_win)
        depth_win[...] = np.where(inside, s, depth_win)
    with np.errstate(divide="ignore"):
        inv_depth = np.where(np.isfinite(depth), 1.0 / depth, np.nan)
    return intensity, inv_depth


def render_intensity(scene: SceneConfig, pose: SE3, cam: CameraModel,
                     supersample: int = 1) -> np.ndarray:
    """Deterministic grayscale rendering of the plane patterns."""
    rays = _ray_grid(cam, supersample)
    intensity, _ = _intersect(scene, pose, rays)
    if supersample > 1:
        h, w = cam.height, cam.width
        intensity = intensity.reshape(h, supersample, w, supersample).mean(axis=(1, 3))
    return intensity


def ground_truth_inverse_depth(scene: SceneConfig, pose: SE3, cam: CameraModel,
                               pixel) -> float | None:
    """Exact ray-plane inverse depth at one pixel, or None off all planes."""
    ray = np.array([[[(pixel[0] - cam.cx) / cam.fx,
                      (pixel[1] - cam.cy) / cam.fy, 1.0]]])
    _, inv_depth = _intersect(scene, pose, ray)
    val = float(inv_depth[0, 0])
    return None if math.isnan(val) else val


def ground_truth_inverse_depth_map(scene: SceneConfig, pose: SE3,
                                   cam: CameraModel) -> np.ndarray:
    """Per-pixel GT inverse depth, NaN where no plane is hit."""
    _, inv_depth = _intersect(scene, pose, _ray_grid(cam))
    return inv_depth


def scene_edge_points(scene: SceneConfig, spacing: float = 0.005) -> np.ndarray:
    """Exact world-frame 3D points sampled along all pattern-cell boundaries
    (where adjacent cells differ) and plane outlines, `spacing` meters apart.

    The analytic edge set is the ground truth for registration oracles: these
    are the scene points that trigger events.
    """
    pts: list[np.ndarray] = []
    for plane in scene.planes:
        ex, ey = plane.extent
        if plane.angle != 0.0:
            tile = math.hypot(ex, ey)
            tx = ty = tile
        else:
            tx, ty = ex, ey
        ny, nx = plane.pattern.shape
        gx = (plane.x_edges if plane.x_edges is not None
              else np.linspace(0.0, 1.0, nx + 1)) * tx - tx / 2
        gy = (plane.y_edges if plane.y_edges is not None
              else np.linspace(0.0, 1.0, ny + 1)) * ty - ty / 2
        segs = []
        for ix in range(1, nx):
            for iy in range(ny):
                if plane.pattern[iy, ix - 1] != plane.pattern[iy, ix]:
                    segs.append((gx[ix], gy[iy], gx[ix], gy[iy + 1]))
        for iy in range(1, ny):
            for ix in range(nx):
                if plane.pattern[iy - 1, ix] != plane.pattern[iy, ix]:
                    segs.append((gx[ix], gy[iy], gx[ix + 1], gy[iy]))
        # Crop outline is an intensity step against the background.
        segs += [(-ex / 2, -ey / 2, ex / 2, -ey / 2), (-ex / 2, ey / 2, ex / 2, ey / 2),
                 (-ex / 2, -ey / 2, -ex / 2, ey / 2), (ex / 2, -ey / 2, ex / 2, ey / 2)]
        ca, sa = math.cos(plane.angle), math.sin(plane.angle)
        for i, (x0, y0, x1, y1) in enumerate(segs):
            n = max(2, int(math.hypot(x1 - x0, y1 - y0) / spacing) + 1)
            qx = np.linspace(x0, x1, n)
            qy = np.linspace(y0, y1, n)
            is_outline = i >= len(segs) - 4
            if plane.angle != 0.0 and not is_outline:
                px = ca * qx - sa * qy
                py = sa * qx + ca * qy
            else:
                px, py = qx, qy
            keep = (np.abs(px) <= ex / 2) & (np.abs(py) <= ey / 2)
            if not keep.any():
                continue
            chunk = np.stack([px[keep] + plane.center[0], py[keep] + plane.center[1],
                              np.full(keep.sum(), plane.depth)], axis=1)
            pts.append(chunk)
    if not pts:
        return np.empty((0, 3))
    return np.concatenate(pts)


def edge_distance_field(scene: SceneConfig, pose: SE3, cam: CameraModel,
                        fine: int = 5, gain: float = 10.0,
                        spacing: float = 0.002, deadband: float = 0.5) -> np.ndarray:
    """Squared pixel distance to the nearest projected scene edge, clipped to
    [0, 255]: value = gain * max(dist - deadband, 0)^2.

    Rasterizes the analytic edge set on a `fine`-times-oversampled grid so the
    valley bottom is sub-pixel sharp; `fine` must be odd so coarse pixel
    centers coincide with fine cells.  The squared profile vanishes together
    with its gradient at the edges and the deadband keeps the floor at zero
    after a Gaussian blur, which is what least-squares registration oracles
    need.  This is the idealized field a blurred time-surface negative
    approximates.
    """
    from scipy import ndimage as _ndimage

    if fine % 2 == 0:
        raise ValueError("fine factor must be odd")
    pts = scene_edge_points(scene, spacing)
    P = pose.inverse().apply(pts)
    ok = P[:, 2] > 1e-9
    P = P[ok]
    u = cam.cx + cam.fx * P[:, 0] / P[:, 2]
    v = cam.cy + cam.fy * P[:, 1] / P[:, 2]
    fu = np.round(u * fine + (fine - 1) / 2).astype(np.int64)
    fv = np.round(v * fine + (fine - 1) / 2).astype(np.int64)
    W, H = cam.width * fine, cam.height * fine
    inb = (fu >= 0) & (fu < W) & (fv >= 0) & (fv < H)
    mask = np.zeros((H, W), dtype=bool)
    mask[fv[inb], fu[inb]] = True
    dist = _ndimage.distance_transform_edt(~mask) / fine
    half = (fine - 1) // 2
    coarse = np.maximum(dist[half::fine, half::fine] - deadband, 0.0)
    return np.minimum(gain * coarse * coarse, 255.0)


@dataclass
class SimResult:
    events_left: np.ndarray
    events_right: np.ndarray
    trajectory: TrajectoryDB
    depth_maps: list[tuple[float, np.ndarray]]
    scene: SceneConfig = field(repr=False, default=None)
    rig: StereoRig = field(repr=False, default=None)
    motion: SimTrajectory = field(repr=False, default=None)


def _probe_points(scene: SceneConfig) -> np.ndarray:
    pts = []
    for plane in scene.planes:
        ex, ey = plane.extent
        cx, cy = plane.center
        for sx in (-0.5, 0.0, 0.5):
            for sy in (-0.5, 0.0, 0.5):
                pts.append([cx + sx * ex, cy + sy * ey, plane.depth])
    return np.asarray(pts)


def _max_pixel_displacement(pts_world, pose_a, pose_b, cam) -> float:
    pa = pose_a.inverse().apply(pts_world)
    pb = pose_b.inverse().apply(pts_world)
    ok = (pa[:, 2] > 1e-6) & (pb[:, 2] > 1e-6)
    if not ok.any():
        return 0.0
    ua = cam.cx + cam.fx * pa[ok, 0] / pa[ok, 2]
    va = cam.cy + cam.fy * pa[ok, 1] / pa[ok, 2]
    ub = cam.cx + cam.fx * pb[ok, 0] / pb[ok, 2]
    vb = cam.cy + cam.fy * pb[ok, 1] / pb[ok, 2]
    return float(np.hypot(ub - ua, vb - va).max())


def _frame_events(log_prev, log_new, t_prev, dt, contrast):
    """Events for one frame interval from the contrast-lattice crossings."""
    a = np.floor(log_prev / contrast).astype(np.int64)
    b = np.floor(log_new / contrast).astype(np.int64)
    delta = b - a
    ys, xs = np.nonzero(delta)
    if len(ys) == 0:
        return None
    counts = np.abs(delta[ys, xs])
    total = int(counts.sum())
    rep_y = np.repeat(ys, counts)
    rep_x = np.repeat(xs, counts)
    start = np.cumsum(counts) - counts
    j = np.arange(total) - np.repeat(start, counts) + 1
    base = np.repeat(a[ys, xs], counts)
    sign = np.repeat(np.sign(delta[ys, xs]), counts)
    level = np.where(sign > 0, base + j, base - j + 1).astype(np.float64) * contrast
    lp = np.repeat(log_prev[ys, xs], counts).astype(np.float64)
    ln = np.repeat(log_new[ys, xs], counts).astype(np.float64)
    times = t_prev + dt * (level - lp) / (ln - lp)
    order = np.argsort(times, kind="stable")
    return make_events(times[order], rep_x[order], rep_y[order], sign[order])


def simulate_events(scene: SceneConfig, traj: SimTrajectory, rig: StereoRig,
                    contrast_threshold: float = 0.3, frame_rate: float = 1000.0,
                    depth_map_rate: float = 20.0, timestamp_jitter: float = 0.0,
                    supersample: int = 1, traj_rate: float = 200.0,
                    seed: int = 0) -> SimResult:
    """Generate calibrated stereo event streams with ground truth.

    Raises if the internal frame rate lets any scene point move a full pixel
    between consecutive frames, which would break crossing interpolation.
    """
    if contrast_threshold <= 0.0:
        raise ValueError("contrast threshold must be positive")
    n_frames = int(round(traj.duration * frame_rate))
    dt = 1.0 / frame_rate
    T_left_right = rig.T_right_left.inverse()
    probe = _probe_points(scene)

    # Rendering runs in single precision on per-plane pixel windows; the log
    # is taken on the downsampled (sensor-resolution) image only.
    rays = {"left": _ray_grid(rig.left, supersample, dtype=np.float32),
            "right": _ray_grid(rig.right, supersample, dtype=np.float32)}
    geom = {side: (cam.fx * supersample, cam.fy * supersample,
                   cam.cx * supersample + (supersample - 1) / 2,
                   cam.cy * supersample + (supersample - 1) / 2)
            for side, cam in (("left", rig.left), ("right", rig.right))}
    cams = {"left": rig.left, "right": rig.right}
    batches = {"left": [], "right": []}
    log_prev = {}
    depth_maps: list[tuple[float, np.ndarray]] = []
    gt_traj = TrajectoryDB()

    depth_stride = max(1, int(round(frame_rate / depth_map_rate)))
    traj_stride = max(1, int(round(frame_rate / traj_rate)))
    prev_pose = None

    for i in range(n_frames + 1):
        t = i * dt
        pose_left = traj.pose_at(t)
        if prev_pose is not None:
            disp = _max_pixel_displacement(probe, prev_pose, pose_left, rig.left)
            if disp >= 1.0:
                raise ValueError(
                    f"frame rate too low: {disp:.2f} px displacement per frame")
        prev_pose = pose_left
        poses = {"left": pose_left, "right": pose_left @ T_left_right}
        for side in ("left", "right"):
            intensity, _ = _intersect(scene, poses[side], rays[side],
                                      grid_geom=geom[side])
            if supersample > 1:
                h, w = cams[side].height, cams[side].width
                intensity = intensity.reshape(h, supersample, w, supersample).mean(axis=(1, 3))
            log_i = np.log(intensity)
            if i > 0:
                out = _frame_events(log_prev[side], log_i, (i - 1) * dt, dt,
                                    contrast_threshold)
                if out is not None:
                    batches[side].append(out)
            log_prev[side] = log_i
        if i % traj_stride == 0 or i == n_frames:
            gt_traj.append(t, pose_left)
        if i % depth_stride == 0:
            depth_maps.append((t, ground_truth_inverse_depth_map(scene, pose_left, rig.left)))

    streams = {}
    rng = np.random.default_rng(seed)
    for side in ("left", "right"):
        if batches[side]:
            ev = np.concatenate(batches[side])
        else:
            ev = np.empty(0, dtype=EVENT_DTYPE)
        if timestamp_jitter > 0.0 and len(ev):
            ev["t"] = np.maximum(ev["t"] + rng.normal(0.0, timestamp_jitter, len(ev)), 0.0)
            ev = ev[np.argsort(ev["t"], kind="stable")]
        streams[side] = ev

    return SimResult(events_left=streams["left"], events_right=streams["right"],
                     trajectory=gt_traj, depth_maps=depth_maps, scene=scene,
                     rig=rig, motion=traj)
