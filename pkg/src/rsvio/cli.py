"""Command-line entry points: simulate, solve, benchmark.

Machine-readable outputs are JSON/CSV files; anything printed to stdout is a
human summary only. Log level comes from the RSVIO_LOG environment variable.
Exit codes: 0 success, 1 usage/input error, 2 solver flagged divergence.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import ba as ba_mod
from . import estimators as est_mod
from . import fileio
from .bias import BiasConfig
from .geometry import ScanlineGeometry
from .noise import dump_jacobians, propagate_all
from .synth import (
    ScenarioConfig,
    TrajectorySpec,
    generate_scenario,
    perturb,
    preset,
    ransac_prune,
    run_monte_carlo,
)
from .system import CorrespondenceSet, assemble, make_pairing, reduce_system
from .validation import FileFormatError, InsufficientDataError

log = logging.getLogger("rsvio")

_METHOD_CHOICES = ("ls", "iter-reweight", "taubin", "renorm", "ba")


def _setup_logging() -> None:
    level = os.environ.get("RSVIO_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _pairing_mode(camera: str, pairing: str) -> str:
    if camera == "mono":
        return "mono"
    return "stereo-dense" if pairing == "dense" else "stereo-first-anchor"


def _parse_methods(text: str):
    methods = tuple(m.strip() for m in text.split(",") if m.strip())
    for m in methods:
        if m not in _METHOD_CHOICES:
            raise argparse.ArgumentTypeError(
                f"unknown method {m!r} (choose from {', '.join(_METHOD_CHOICES)})")
    return methods


def _add_scenario_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--frames", type=int, default=5)
    p.add_argument("--pairing", choices=("dense", "first-anchor"), default="dense")
    p.add_argument("--camera", choices=("mono", "stereo"), default="stereo")
    p.add_argument("--shutter", choices=("rs", "gs-on-rs"), default="rs")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rsvio",
                                 description="Initial velocity/gravity estimation "
                                             "for rolling-shutter camera+IMU rigs")
    sub = ap.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="write a synthetic dataset")
    sim.add_argument("--kind", default="forward",
                     choices=("forward", "loop", "shake", "forward-back"))
    sim.add_argument("--length", type=float, default=9.0)
    sim.add_argument("--speed", type=float, default=0.7)
    sim.add_argument("--points", type=int, default=50)
    sim.add_argument("--sigma", type=float, default=0.0,
                     help="pixel noise std written into the tracks")
    sim.add_argument("--window", type=int, default=0)
    sim.add_argument("--out", default=".")
    _add_scenario_flags(sim)

    sol = sub.add_parser("solve", help="estimate v0/g0 from dataset files")
    sol.add_argument("--imu", required=True)
    sol.add_argument("--tracks", required=True)
    sol.add_argument("--calib", required=True)
    sol.add_argument("--method", type=_parse_methods, default=("renorm",),
                     help="comma-separated list from: " + ", ".join(_METHOD_CHOICES))
    sol.add_argument("--out", default=".")
    sol.add_argument("--shutter", choices=("rs", "gs-on-rs"), default="rs")
    sol.add_argument("--no-ransac", action="store_true")
    sol.add_argument("--ransac-iters", type=int, default=200)
    sol.add_argument("--sigma-assumed", type=float, default=0.3)
    sol.add_argument("--model-accel-bias", action="store_true")
    sol.add_argument("--model-gyro-bias", action="store_true")
    sol.add_argument("--trace", action="store_true",
                     help="dump the refinement cost trace as CSV")
    sol.add_argument("--dump-jacobians", action="store_true")
    sol.add_argument("--seed", type=int, default=0)

    ben = sub.add_parser("benchmark", help="Monte-Carlo noise study")
    ben.add_argument("--preset", default=None,
                     choices=("paper-fig3", "paper-fig4", "paper-fig5",
                              "paper-fig6", "paper-fig7", "forward"))
    ben.add_argument("--sigma", default="0,0.1,0.2,0.3,0.4,0.5",
                     help="comma-separated pixel noise grid")
    ben.add_argument("--trials", type=int, default=100)
    ben.add_argument("--windows", type=int, default=1)
    ben.add_argument("--points", type=int, default=50)
    ben.add_argument("--methods", type=_parse_methods, default=("ls", "renorm", "ba"))
    ben.add_argument("--jobs", type=int, default=0,
                     help="worker processes (0 = serial)")
    ben.add_argument("--out", default=".")
    _add_scenario_flags(ben)
    return ap


def cmd_simulate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = ScenarioConfig(
        n_points=args.points, frames=args.frames, seed=args.seed,
        pairing=_pairing_mode(args.camera, args.pairing), shutter=args.shutter,
        sigma_px=(args.sigma,))
    traj = TrajectorySpec(kind=args.kind, length=args.length, mean_speed=args.speed)
    scenario = generate_scenario(traj, cfg, window=args.window)
    tracks, stream = scenario.tracks, scenario.stream
    if args.sigma > 0:
        rng = np.random.default_rng(np.random.SeedSequence([args.seed, args.window, 1]))
        real = perturb(scenario, args.sigma, rng)
        tracks, stream = real.tracks, real.stream
    fileio.save_imu_csv(stream, out / "imu.csv")
    fileio.save_calibration(scenario.calib, out / "calib.json")
    fileio.save_tracks(tracks, cfg.pairing, out / "tracks.json")
    fileio.save_ground_truth(scenario.gt_v0, scenario.gt_g0, out / "gt.json",
                             extra={"sigma_px": args.sigma, "window": args.window,
                                    "kind": args.kind})
    print(f"wrote imu.csv, calib.json, tracks.json, gt.json to {out} "
          f"({len(tracks)} tracks, {len(stream)} IMU samples)")
    return 0


def cmd_solve(args) -> int:
    out = Path(args.out)
    if out.suffix != ".json":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "estimate.json"
    stream = fileio.load_imu_csv(args.imu)
    calib = fileio.load_calibration(args.calib)
    tracks, pairing = fileio.load_tracks(args.tracks)
    n_corr = sum(len(t.observations) for t in tracks)
    if n_corr == 0:
        raise InsufficientDataError("need >= 6 correspondences, tracks file is empty")
    frames = max(o.frame for t in tracks for o in t.observations) + 1
    geom = ScanlineGeometry.build(stream, calib, shutter=args.shutter)
    corrs = CorrespondenceSet.build(tracks, make_pairing(frames, pairing), geom)
    if not args.no_ransac:
        corrs, info = ransac_prune(corrs, sigma_assumed=args.sigma_assumed,
                                   n_iters=args.ransac_iters, seed=args.seed)
        log.info("RANSAC kept %d/%d correspondences", info["n_inliers"], info["n_input"])
    bias_cfg = None
    if args.model_accel_bias or args.model_gyro_bias:
        bias_cfg = BiasConfig(model_accel=args.model_accel_bias,
                              model_gyro=args.model_gyro_bias)
    reduced = reduce_system(assemble(corrs, bias_cfg))
    if args.dump_jacobians:
        dump_jacobians(reduced, out.parent / "jacobians.csv")
    needs_cov = {"taubin", "iter-reweight", "renorm"} & set(args.method)
    covs = propagate_all(reduced) if needs_cov else None

    estimates = []
    by_name = {}
    for name in args.method:
        if name == "ls":
            est = est_mod.solve_ls(reduced)
        elif name == "taubin":
            est = est_mod.solve_taubin(reduced, covs)
        elif name == "iter-reweight":
            est = est_mod.solve_iter_reweight(reduced, covs)
        elif name == "renorm":
            est = est_mod.solve_renorm(reduced, covs)
        else:
            seed = by_name.get("renorm") or by_name.get("ls")
            if seed is None:
                seed = est_mod.solve_ls(reduced)
            est = ba_mod.refine(reduced, seed,
                                trace_path=(out.parent / "ba_trace.csv"
                                            if args.trace else None))
        by_name[name] = est
        estimates.append(est)
        v = ", ".join(f"{x:+.4f}" for x in est.v0)
        print(f"{name:>13}: v0 = [{v}] m/s  |g0| = {np.linalg.norm(est.g0):.4f} "
              f"iters = {est.iterations} converged = {est.converged}")
    fileio.save_estimates(estimates, out)
    print(f"estimates written to {out}")
    return 0 if all(e.converged for e in estimates) else 2


def cmd_benchmark(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = args.jobs if args.jobs > 0 else 1
    if args.preset:
        traj, configs = preset(args.preset, trials=args.trials, seed=args.seed)
        configs = [(label, replace(cfg, n_windows=args.windows), methods)
                   for label, cfg, methods in configs]
        figname = args.preset.replace("paper-", "")
    else:
        sigma = tuple(float(s) for s in args.sigma.split(","))
        cfg = ScenarioConfig(sigma_px=sigma, n_trials=args.trials,
                             n_points=args.points, frames=args.frames,
                             pairing=_pairing_mode(args.camera, args.pairing),
                             shutter=args.shutter, seed=args.seed,
                             n_windows=args.windows)
        traj = TrajectorySpec()
        configs = [("custom", cfg, args.methods)]
        figname = "custom"
    for label, cfg, methods in configs:
        result = run_monte_carlo(traj, cfg, methods, jobs=jobs)
        agg = result.aggregate()
        fileio.write_trial_csv(result.rows, out / f"trials_{label}.csv")
        fileio.write_aggregate_csv(agg, out / f"aggregate_{label}.csv")
        fileio.write_plotdata_csv(agg, methods, out / f"{figname}_{label}.csv")
        for (sigma, method), st in sorted(agg.items()):
            if st.get("n"):
                print(f"{label:>14} sigma={sigma:.2f} {method:>13}: "
                      f"eps_v = {st['mean_eps_v']:.5f} m/s  "
                      f"eps_g = {st['mean_eps_g']:.5f} deg  (n={st['n']})")
    print(f"result CSVs written to {out}")
    return 0


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        if args.command == "simulate":
            return cmd_simulate(args)
        if args.command == "solve":
            return cmd_solve(args)
        return cmd_benchmark(args)
    except (FileFormatError, InsufficientDataError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
