"""Command-line entry point wiring the full pipeline.

Subcommands: simulate, train, localize, eval, render.  Every run echoes the
fully resolved configuration (defaults included) before doing work, and all
randomness is controlled by a --seed flag.

Exit codes: 0 ok, 2 usage, 3 I/O, 4 data/schema, 5 numeric failure.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from typing import List, Optional

import numpy as np

from . import evalio, mcl, sim, training
from .mcl import DegenerateWeightsError, MclConfig
from .se2 import Pose2

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_DATA = 4
EXIT_NUMERIC = 5

# default waypoint tours through the built-in worlds
_TOURS = {
    "square": [(1.0, 1.0), (3.0, 1.0), (3.0, 3.0), (1.0, 3.0), (1.0, 1.0)],
    "tworoom": [
        (1.5, 1.5), (1.5, 4.5), (3.0, 3.0), (5.0, 3.0), (6.5, 4.5),
        (6.5, 1.5), (5.0, 3.0), (3.0, 3.0), (1.5, 1.5),
    ],
    "corridor_offices": [
        (2.5, 2.5), (1.6, 3.8), (1.6, 6.5), (7.1, 6.5), (7.1, 3.5),
        (7.1, 6.5), (12.9, 6.5), (12.9, 3.0), (12.9, 6.5), (17.6, 6.5),
        (17.6, 3.0), (17.6, 6.5), (10.0, 6.5),
    ],
}


def _echo_config(args: argparse.Namespace) -> None:
    print(f"command: {args.command}")
    for key in sorted(vars(args)):
        if key == "command":
            continue
        print(f"  {key} = {getattr(args, key)}")


def _build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(prog="enmloc", description=__doc__)
    sub = top.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic scan dataset")
    p.add_argument("--world", required=True, choices=sorted(_TOURS))
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--frames", type=int, default=0, help="subsample to N frames (0: all)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--beams", type=int, default=1081)
    p.add_argument("--range-noise", type=float, default=0.01)
    p.add_argument("--odom-noise", type=float, nargs=4, default=(0.02, 0.02, 0.01, 0.01),
                   metavar=("A1", "A2", "A3", "A4"))
    p.add_argument("--speed", type=float, default=0.5)
    p.add_argument("--dt", type=float, default=0.1)

    p = sub.add_parser("train", help="fit a distance-field map to a posed dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--iters", type=int, default=5000)
    p.add_argument("--batch", type=int, default=2048)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--grid-res", type=float, default=0.10)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("localize", help="run the particle filter on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--map", required=True, dest="map_path")
    p.add_argument("--out", required=True, help="trajectory log path")
    p.add_argument("--n-init", type=int, default=80000)
    p.add_argument("--n-track", type=int, default=1000)
    p.add_argument("--lambda", type=float, default=10.0, dest="lam")
    p.add_argument("--beams", type=int, default=60)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--known-start", action="store_true",
                   help="initialize near the first ground-truth pose (tracking mode)")

    p = sub.add_parser("eval", help="score a trajectory against dataset ground truth")
    p.add_argument("--est", required=True)
    p.add_argument("--gt", required=True, help="dataset file with gt poses")
    p.add_argument("--from-convergence", action="store_true")
    p.add_argument("--pos-gate", type=float, default=0.3)

    p = sub.add_parser("render", help="write the SDF as a P5 graymap")
    p.add_argument("--map", required=True, dest="map_path")
    p.add_argument("--out", required=True)
    p.add_argument("--ppm", type=float, default=20.0, help="pixels per meter")
    return top


def _cmd_simulate(args) -> int:
    plan = sim.make_world(args.world)
    spec = sim.SensorSpec(n_beams=args.beams, range_noise_std=args.range_noise)
    rng = np.random.default_rng(args.seed)
    traj = sim.generate_trajectory(plan, _TOURS[args.world], speed=args.speed, dt=args.dt)
    if args.frames and args.frames < len(traj):
        keep = np.linspace(0, len(traj) - 1, args.frames).round().astype(int)
        traj = [traj[i] for i in keep]
    scans = sim.simulate_dataset(plan, traj, spec, tuple(args.odom_noise), rng)
    os.makedirs(args.out, exist_ok=True)
    evalio.write_dataset(scans, os.path.join(args.out, "scans.txt"))
    sim.save_floorplan(plan, os.path.join(args.out, "floorplan.txt"))
    print(f"wrote {len(scans)} scans to {args.out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    scans = evalio.read_dataset(args.data)
    cfg = training.TrainConfig(
        iterations=args.iters,
        batch_rays=args.batch,
        lr=args.lr,
        grid_resolution=args.grid_res,
        seed=args.seed,
    )
    model = training.train_map(scans, cfg, log_path=str(args.out) + ".log")
    evalio.save_checkpoint(model, args.out)
    print(f"wrote checkpoint {args.out} ({evalio.checkpoint_size(model)} bytes)")
    return EXIT_OK


def _cmd_localize(args) -> int:
    scans = evalio.read_dataset(args.data)
    model = evalio.load_checkpoint(args.map_path)
    cfg = MclConfig(
        n_init=args.n_init,
        n_track=args.n_track,
        lam=args.lam,
        beam_subsample=args.beams,
        seed=args.seed,
    )
    start: Optional[Pose2] = None
    if args.known_start:
        if scans[0].gt is None:
            raise evalio.DatasetFormatError("--known-start needs gt in the dataset")
        start = scans[0].gt
    rows = mcl.run_localization(scans, model, cfg, start=start)
    evalio.write_trajectory(rows, args.out)
    n_conv = sum(r.converged for r in rows)
    print(f"wrote {len(rows)} trajectory rows to {args.out} ({n_conv} converged)")
    return EXIT_OK


def _cmd_eval(args) -> int:
    est = evalio.read_trajectory(args.est)
    gt = evalio.gt_trajectory(evalio.read_dataset(args.gt))
    success, t_conv = evalio.success_and_convergence(est, gt, pos_gate=args.pos_gate)
    from_time = t_conv if (args.from_convergence and t_conv is not None) else -math.inf
    report = evalio.ate_rmse(est, gt, from_time=from_time)
    report.success = success
    report.convergence_time = t_conv
    evalio.write_metrics(report, sys.stdout)
    return EXIT_OK


def _cmd_render(args) -> int:
    model = evalio.load_checkpoint(args.map_path)
    evalio.render_sdf_image(model, model.grid.origin, model.grid.upper, args.ppm, args.out)
    print(f"wrote {args.out} and {args.out}.contour.pgm")
    return EXIT_OK


_HANDLERS = {
    "simulate": _cmd_simulate,
    "train": _cmd_train,
    "localize": _cmd_localize,
    "eval": _cmd_eval,
    "render": _cmd_render,
}


def run(argv: Optional[List[str]] = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    _echo_config(args)
    try:
        return _HANDLERS[args.command](args)
    except (FileNotFoundError, PermissionError, IsADirectoryError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (evalio.DatasetFormatError, evalio.CheckpointFormatError,
            evalio.CheckpointCorruptError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DegenerateWeightsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())
