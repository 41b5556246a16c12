"""Command-line interface.

Subcommands: run (full system), map (mapping-only with GT poses), sim
(generate synthetic data), eval (trajectory metrics), bench (throughput).
Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="esvo",
                     description="Stereo event-camera visual odometry toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run the full VO system on event files")
    p_run.add_argument("--config", required=True, help="key=value config file")

    p_map = sub.add_parser("map", help="mapping-only mode with ground-truth poses")
    p_map.add_argument("--config", required=True)
    p_map.add_argument("--gt-poses", required=True,
                       help="trajectory file supplying poses to the mapper")

    p_sim = sub.add_parser("sim", help="generate a synthetic stereo event dataset")
    p_sim.add_argument("--scene", default="three_planes",
                       choices=["three_planes", "single_plane"])
    p_sim.add_argument("--motion", default="translate-x",
                       choices=["translate-x", "translate-y", "translate-z",
                                "rotate-z", "spline"])
    p_sim.add_argument("--out", required=True)
    p_sim.add_argument("--duration", type=float, default=2.0)
    p_sim.add_argument("--speed", type=float, default=0.5)
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--width", type=int, default=346)
    p_sim.add_argument("--height", type=int, default=260)
    p_sim.add_argument("--focal", type=float, default=150.0)
    p_sim.add_argument("--baseline", type=float, default=0.1)
    p_sim.add_argument("--contrast", type=float, default=0.3)
    p_sim.add_argument("--frame-rate", type=float, default=1000.0)
    p_sim.add_argument("--jitter", type=float, default=0.0,
                       help="timestamp jitter sigma in seconds")
    p_sim.add_argument("--supersample", type=int, default=2)

    p_eval = sub.add_parser("eval", help="trajectory ATE/RPE against ground truth")
    p_eval.add_argument("--est", required=True)
    p_eval.add_argument("--gt", required=True)
    p_eval.add_argument("--rpe-delta", type=float, default=1.0)

    sub.add_parser("bench", help="throughput report for the core stages")
    return parser


def _cmd_run(args) -> int:
    from .pipeline import load_system_config, run_vo

    try:
        config = load_system_config(args.config)
    except (OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DATA
    try:
        result = run_vo(config)
    except (OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    stats = result.stats
    print(f"observations: {stats['observations']}")
    print(f"tracked poses: {stats['tracked']}")
    print(f"tracking failures: {stats['track_failures']} (reinits: {stats['reinits']})")
    print(f"mapping rounds: {stats['mapping_rounds']}")
    print(f"events consumed: {stats['events']}")
    print(f"map points in cloud: {len(result.cloud)}")
    if config.output_dir:
        print(f"outputs written to {config.output_dir}")
    return EXIT_OK


def _cmd_map(args) -> int:
    from .pipeline import load_system_config, run_vo

    try:
        config = load_system_config(args.config)
    except (OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DATA
    config.gt_poses = args.gt_poses
    try:
        result = run_vo(config)
    except (OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"mapping rounds: {result.stats['mapping_rounds']}")
    print(f"map points in cloud: {len(result.cloud)}")
    if config.output_dir:
        print(f"outputs written to {config.output_dir}")
    return EXIT_OK


def _cmd_sim(args) -> int:
    from .geometry import SE3, CameraModel, StereoRig, save_calibration, save_trajectory
    from .mapping import write_float_map
    from .simulator import (SimTrajectory, simulate_events, single_plane_scene,
                            three_plane_scene)
    from .time_surface import save_events

    cam = CameraModel(fx=args.focal, fy=args.focal, cx=(args.width - 1) / 2,
                      cy=(args.height - 1) / 2, width=args.width, height=args.height)
    rig = StereoRig(cam, cam, SE3(np.eye(3), [-args.baseline, 0.0, 0.0]))
    sweep = abs(args.speed) * args.duration * 1.2 + 0.1
    if args.scene == "three_planes":
        scene = three_plane_scene(cam, seed=args.seed, sweep=sweep)
    else:
        scene = single_plane_scene(cam, seed=args.seed)
    traj = SimTrajectory(args.motion, duration=args.duration, speed=args.speed)
    try:
        sim = simulate_events(scene, traj, rig, contrast_threshold=args.contrast,
                              frame_rate=args.frame_rate,
                              timestamp_jitter=args.jitter,
                              supersample=args.supersample, seed=args.seed)
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_events(sim.events_left, out / "events_left.txt")
    save_events(sim.events_right, out / "events_right.txt")
    save_calibration(rig, out / "calib.txt")
    save_trajectory(sim.trajectory, out / "gt_trajectory.txt")
    depth_dir = out / "gt_depth"
    depth_dir.mkdir(exist_ok=True)
    for i, (t, grid) in enumerate(sim.depth_maps):
        write_float_map(depth_dir / f"inv_depth_{i:04d}.txt", t, grid)
    print(f"{len(sim.events_left)} left / {len(sim.events_right)} right events "
          f"written to {out}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .geometry import load_trajectory
    from .pipeline import evaluate

    try:
        est = load_trajectory(args.est)
        gt = load_trajectory(args.gt)
    except (OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DATA
    try:
        report = evaluate(est, gt, rpe_delta=args.rpe_delta)
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"ATE RMS: {report.ate_rms * 100:.3f} cm")
    print(f"RPE rotation: {report.rpe_rot_deg_per_s:.3f} deg/s")
    print(f"RPE translation: {report.rpe_trans_m_per_s * 100:.3f} cm/s")
    return EXIT_OK


def _bench() -> int:
    from .geometry import CameraModel, SE3, StereoRig
    from .mapping import (MapperConfig, PatchConfig, ResidualModel,
                          SemiDenseDepthMap, StereoObservation, _fuse_arrays,
                          _event_motions, init_inverse_depth_batch,
                          refine_inverse_depth_batch)
    from .simulator import SimTrajectory, simulate_events, three_plane_scene
    from .time_surface import LastEventMap, blur, negative, render
    from .tracking import TrackerConfig, TrackingProblem, track

    cam = CameraModel(fx=150.0, fy=150.0, cx=172.5, cy=129.5, width=346, height=260)
    rig = StereoRig(cam, cam, SE3(np.eye(3), [-0.1, 0.0, 0.0]))
    scene = three_plane_scene(cam, seed=3, sweep=0.4)
    motion = SimTrajectory("translate-x", duration=0.5, speed=0.5)
    sim = simulate_events(scene, motion, rig, frame_rate=500.0, supersample=1, seed=0)
    t_obs = 0.45
    maps = (LastEventMap(cam.width, cam.height), LastEventMap(cam.width, cam.height))
    for m, ev in zip(maps, (sim.events_left, sim.events_right)):
        m.ingest(ev[ev["t"] <= t_obs])

    t0 = time.perf_counter()
    ts_left = render(maps[0], t_obs, 0.03)
    ts_right = render(maps[1], t_obs, 0.03)
    t_render = time.perf_counter() - t0
    obs = StereoObservation(ts_left, ts_right)

    config = MapperConfig()
    model = ResidualModel()
    events = sim.events_left
    recent = events[(events["t"] > t_obs - 0.05) & (events["t"] <= t_obs)]
    rng = np.random.default_rng(0)
    recent = recent[rng.choice(len(recent), size=min(1000, len(recent)), replace=False)]
    pixels = np.stack([recent["x"], recent["y"]], axis=1).astype(np.float64)

    t0 = time.perf_counter()
    rho0, ok = init_inverse_depth_batch(pixels, obs, rig, (2, 40), config.patch,
                                        config.zncc_threshold)
    t_match = time.perf_counter() - t0

    pixels_ok = pixels[ok][:500]
    rho_ok = np.clip(rho0[ok][:500], config.rho_min, config.rho_max)
    R_rel, t_rel = _event_motions(sim.trajectory, t_obs, recent["t"][ok][:500])
    t0 = time.perf_counter()
    out = refine_inverse_depth_batch(pixels_ok, rho_ok, R_rel, t_rel, obs, rig,
                                     config.patch, model)
    t_refine = time.perf_counter() - t0
    n_refined = int((out["status"] == 0).sum())

    depth_map = SemiDenseDepthMap(cam.width, cam.height, t_obs, SE3.identity())
    n_fusions = 60000
    rngf = np.random.default_rng(1)
    us = rngf.uniform(1, cam.width - 2, n_fusions)
    vs = rngf.uniform(1, cam.height - 2, n_fusions)
    mus = rngf.uniform(0.4, 1.2, n_fusions)
    ss = rngf.uniform(0.01, 0.2, n_fusions)
    nus = rngf.uniform(2.1, 8.0, n_fusions)
    t0 = time.perf_counter()
    _fuse_arrays(depth_map, us, vs, mus, ss, nus)
    t_fuse = time.perf_counter() - t0

    good = out["status"] == 0
    problem = TrackingProblem(ref_pixels=pixels_ok[good],
                              ref_inv_depths=out["rho"][good],
                              ref_pose=SE3.identity(),
                              target=blur(negative(ts_left), 5), cam=cam)
    t0 = time.perf_counter()
    track(problem, TrackerConfig(seed=0))
    t_track = time.perf_counter() - t0

    print(f"{'stage':<38}{'time':>12}")
    print(f"{'time surface render (pair)':<38}{1e3 * t_render:>9.1f} ms")
    print(f"{'block matching (1000 events)':<38}{1e3 * t_match:>9.1f} ms")
    print(f"{'depth refinement (500 events)':<38}{1e3 * t_refine:>9.1f} ms"
          f"   ({n_refined} converged)")
    print(f"{'depth fusion (60000 ops)':<38}{1e3 * t_fuse:>9.1f} ms")
    print(f"{'track solve (300 pts x 5 iter)':<38}{1e3 * t_track:>9.1f} ms")
    return EXIT_OK


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    if args.command == "run":
        return _cmd_run(args)
    if args.command == "map":
        return _cmd_map(args)
    if args.command == "sim":
        return _cmd_sim(args)
    if args.command == "eval":
        return _cmd_eval(args)
    if args.command == "bench":
        return _bench()
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
