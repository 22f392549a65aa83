"""Command-line entry points: simulate, run, evaluate, report.

Exit codes: 0 success, 1 dataset error, 2 initialization failure, 3 solver
divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import dataio
from .config import RunConfig, load_config
from .errors import (
    DatasetError,
    InitializationFailure,
    IoFailure,
    NoOverlap,
    PlioError,
    SolverDiverged,
    TooFewPairs,
    UnknownPreset,
)
from .evaluation import TrajectoryRecord, error_series, evaluate
from .imu import WorldConfig
from .pipeline import run_odometry
from .simulator import (
    AnalyticTrajectory,
    generate_imu,
    generate_lidar,
    make_trajectory_spec,
    make_world,
    noise_preset,
)

EXIT_OK = 0
EXIT_DATASET = 1
EXIT_INIT = 2
EXIT_SOLVER = 3


def cmd_simulate(args) -> int:
    world = make_world(args.world)
    spec = make_trajectory_spec(args.trajectory, duration=args.duration)
    if args.rays is not None:
        spec.rays_per_frame = args.rays
    traj = AnalyticTrajectory(spec)
    noise = noise_preset(args.noise)
    world_cfg = WorldConfig()
    imu, states = generate_imu(traj, noise, world_cfg, seed=args.seed)
    frames = generate_lidar(traj, world, noise, seed=args.seed)
    files = dataio.write_dataset(imu, frames, states, args.output)
    print(f"wrote {len(files)} files to {args.output}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = RunConfig()
    if args.config:
        cfg = load_config(args.config, cfg)
    dataset = Path(args.dataset)
    imu = dataio.read_imu_csv(dataset / "imu.csv")
    frames = dataio.read_lidar_csv(dataset / "lidar.csv")
    record, report = run_odometry(imu, frames, cfg)
    out = Path(args.output) if args.output else dataset / "estimate.tum"
    dataio.write_tum(out, record.t, record.p, record.q)
    report_path = out.with_suffix(".report.json")
    _write_report(report_path, record, report)
    print(
        f"keyframes={len(report.keyframes)} ba_factors={report.total_ba_factors} "
        f"wall={report.wall_time:.2f}s -> {out}"
    )
    return EXIT_OK


def _write_report(path, record: TrajectoryRecord, report) -> None:
    doc = {
        "covariance_mode": report.covariance_mode,
        "jacobian_mode": report.jacobian_mode,
        "n_frames": report.n_frames,
        "n_imu": report.n_imu,
        "wall_time": report.wall_time,
        "estimate": {
            "t": record.t.tolist(),
            "p": record.p.tolist(),
            "q": record.q.tolist(),
        },
        "keyframes": [
            {
                "t": k.t,
                "node_id": k.node_id,
                "n_nodes": k.n_nodes,
                "n_ba_new": k.n_ba_new,
                "n_ba_active": k.n_ba_active,
                "n_preint": k.n_preint,
                "n_culled_step1": k.n_culled_step1,
                "iterations": k.iterations,
                "cost_final": k.cost_final,
                "timing": k.timing,
                "pos_cov_diag": None if k.pos_cov_diag is None else k.pos_cov_diag.tolist(),
                "att_cov_diag": None if k.att_cov_diag is None else k.att_cov_diag.tolist(),
            }
            for k in report.keyframes
        ],
    }
    try:
        Path(path).write_text(json.dumps(doc, indent=1))
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from None


def cmd_evaluate(args) -> int:
    t, p, q = dataio.read_tum(args.estimate)
    est = TrajectoryRecord(t, p, q)
    t, p, q = dataio.read_tum(args.truth)
    truth = TrajectoryRecord(t, p, q)
    value = evaluate(est, truth, args.mode)
    unit = {"ate": "m", "are": "deg", "end_to_end": "m"}[args.mode]
    print(f"{args.mode} = {value:.6f} {unit}")
    if args.output:
        Path(args.output).write_text(f"{args.mode} = {value:.9g} {unit}\n")
    return EXIT_OK


def cmd_report(args) -> int:
    doc = json.loads(Path(args.report).read_text())
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    kfs = doc["keyframes"]

    with open(out / "factors.csv", "w") as fh:
        fh.write("t,n_nodes,n_ba_new,n_ba_active,n_preint,n_culled_step1,iterations,cost_final\n")
        for k in kfs:
            fh.write(
                f"{k['t']:.9g},{k['n_nodes']},{k['n_ba_new']},{k['n_ba_active']},"
                f"{k['n_preint']},{k['n_culled_step1']},{k['iterations']},{k['cost_final']:.9g}\n"
            )
    with open(out / "timing.csv", "w") as fh:
        stages = ["map", "preint", "associate", "solve", "marginalize"]
        fh.write("t," + ",".join(stages) + "\n")
        for k in kfs:
            vals = [k["timing"].get(s, 0.0) for s in stages]
            fh.write(f"{k['t']:.9g}," + ",".join(f"{v:.9g}" for v in vals) + "\n")
    with open(out / "covariance.csv", "w") as fh:
        fh.write("t,px,py,pz,rx,ry,rz\n")
        for k in kfs:
            if k["pos_cov_diag"] is None:
                continue
            vals = list(k["pos_cov_diag"]) + list(k["att_cov_diag"])
            fh.write(f"{k['t']:.9g}," + ",".join(f"{v:.9g}" for v in vals) + "\n")
    n_csv = 3
    if args.truth:
        est = doc["estimate"]
        record = TrajectoryRecord(
            np.array(est["t"]), np.array(est["p"]), np.array(est["q"])
        )
        t, p, q = dataio.read_tum(args.truth)
        truth = TrajectoryRecord(t, p, q)
        ts, pos_err, att_err = error_series(record, truth)
        with open(out / "errors.csv", "w") as fh:
            fh.write("t,ex,ey,ez,rx_deg,ry_deg,rz_deg\n")
            for i in range(ts.size):
                row = [ts[i], *pos_err[i], *att_err[i]]
                fh.write(",".join(f"{v:.9g}" for v in row) + "\n")
        n_csv += 1
    print(f"wrote {n_csv} csv files to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="plio", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    p.add_argument("--world", default="box", help="box | corridor | corner | panels")
    p.add_argument("--trajectory", default="circle", help="circle | figure8 | straight | rich")
    p.add_argument("--noise", default="mems", help="noisefree | mems")
    p.add_argument("--duration", type=float, default=60.0)
    p.add_argument("--rays", type=int, default=None, help="rays per frame")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", required=True, help="dataset directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("run", help="run the estimator on a dataset directory")
    p.add_argument("--dataset", required=True)
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--output", default=None, help="estimate .tum path")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("evaluate", help="compare a trajectory against ground truth")
    p.add_argument("--estimate", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--mode", choices=["ate", "are", "end_to_end"], default="ate")
    p.add_argument("--output", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="emit plot-ready csv series from a run report")
    p.add_argument("--report", required=True, help="report.json from `run`")
    p.add_argument("--truth", default=None, help="groundtruth.tum for error series")
    p.add_argument("--output", required=True, help="output directory")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (DatasetError, IoFailure, UnknownPreset, NoOverlap, TooFewPairs) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATASET
    except InitializationFailure as e:
        print(f"initialization failure: {e}", file=sys.stderr)
        return EXIT_INIT
    except SolverDiverged as e:
        print(f"solver diverged: {e}", file=sys.stderr)
        return EXIT_SOLVER
    except PlioError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATASET


if __name__ == "__main__":
    sys.exit(main())
