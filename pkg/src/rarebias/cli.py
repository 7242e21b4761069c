"""Command-line entry point.

Every subcommand writes its outputs plus a ``manifest.txt`` under ``--out``.
Passing ``--manifest <file>`` re-runs a recorded invocation with identical
settings (only ``--out`` is taken from the new command line).

Exit codes: 0 success, 2 usage error, 3 runtime or numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time

import numpy as np

from . import __version__
from .committor import GridField, GridSpec, ground_truth_bias, solve_committor
from .dynamics import SimConfig, TrajectoryBatch, classify_channel, simulate
from .errors import RareBiasError
from .estimator import importance_estimate, monte_carlo_estimate, scaling_study
from .netbias import bias_energy, checkpoint_hash, load_checkpoint, save_checkpoint
from .potentials import PotentialSpec, find_minima, make_potential, paper_minima
from .store import (
    TrajectoryRecord, dataset_header, merge_datasets, read_dataset, read_manifest,
    write_dataset, write_manifest,
)
from .objective import OBJECTIVES
from .trainer import TrainConfig, train_combine, train_explore

log = logging.getLogger("rarebias")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
REPLAY_SKIP = {"out", "manifest", "command", "func", "verbose"}


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ helpers

def _pair(text: str) -> list[float]:
    try:
        x, y = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'x,y', got {text!r}")
    return [x, y]


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _sha256(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _require_file(path, what):
    if path is None:
        raise UsageError(f"missing {what}")
    if not os.path.isfile(path) or not os.access(path, os.R_OK):
        raise UsageError(f"cannot read {what} {path!r}; check the path")
    return path


def _potential(args) -> PotentialSpec:
    if args.potential == "paper2d":
        return PotentialSpec("paper2d", {"tilt": args.tilt})
    if args.potential == "quadratic-well":
        return PotentialSpec("quadratic-well", {"cx": args.well_center[0], "cy": args.well_center[1], "k": args.well_k})
    return PotentialSpec(args.potential)


def _sim_config(args) -> SimConfig:
    if args.start is None or args.target is None:
        if args.potential != "paper2d":
            raise UsageError("--start and --target are required for non-paper potentials")
        a, b = paper_minima(args.tilt)
    start = np.array(args.start) if args.start is not None else a
    target = np.array(args.target) if args.target is not None else b
    return SimConfig(
        temperature=args.temperature, mass=args.mass, gamma=args.gamma, dt=args.dt,
        n_steps=args.n_steps, delta=args.delta, start_near=start, target=target, seed=args.seed,
    )


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        batch_size=args.batch_size, steps=args.steps, learning_rate=args.learning_rate,
        r_start=args.r_start, r_end=args.r_end, r_shape=args.r_shape, s=args.s,
        optimizer=args.optimizer, checkpoint_every=args.checkpoint_every, seed=args.seed,
        hidden_widths=tuple(args.hidden_widths), feature_mode=args.feature_mode,
        control_sign=-1.0 if args.negative_control_features else 1.0,
        objective=args.objective, ce_weight=args.ce_weight,
    )


def _load_bias(args, inputs: dict):
    if args.checkpoint and args.bias_field:
        raise UsageError("give either --checkpoint or --bias-field, not both")
    if args.checkpoint:
        inputs["checkpoint"] = _sha256(_require_file(args.checkpoint, "checkpoint"))
        return load_checkpoint(args.checkpoint)
    if args.bias_field:
        inputs["bias_field"] = _sha256(_require_file(args.bias_field, "bias field"))
        return make_potential(PotentialSpec("grid-interpolated", field=GridField.load(args.bias_field)))
    return None


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


def _output_path(args, path):
    """Relative output paths live under ``--out`` so replays stay self-contained."""
    return path if os.path.isabs(path) else os.path.join(args.out, path)


def _save_successes(batch: TrajectoryBatch, path, pot_spec, cfg, keep_noises: bool):
    recs = [TrajectoryRecord.from_trajectory(batch[i], keep_noises) for i in np.flatnonzero(batch.success)]
    write_dataset(recs, path, dataset_header(pot_spec, cfg))
    return recs


def _manifest(args, out, pot_spec, cfg, extra: dict):
    argd = {k: v for k, v in vars(args).items() if k not in REPLAY_SKIP}
    content = {
        "command": args.command,
        "version": __version__,
        "args": json.loads(json.dumps(argd)),
        "potential": pot_spec.to_dict(),
        "sim": cfg.to_dict() if cfg is not None else {},
        **extra,
    }
    write_manifest(os.path.join(out, "manifest.txt"), content)


# ------------------------------------------------------------------ commands

def cmd_find_minima(args):
    pot = _potential(args)
    mins = find_minima(pot, ((args.box[0], args.box[1]), (args.box[2], args.box[3])), args.grid_n, args.tol)
    p = make_potential(pot)
    rows = [(float(m[0]), float(m[1]), float(p.energy(m))) for m in mins]
    _write_csv(os.path.join(args.out, "minima.csv"), ("x", "y", "energy"), rows)
    for x, y, e in rows:
        print(f"minimum at ({x:.6f}, {y:.6f})  U = {e:.6f}")
    _manifest(args, args.out, pot, None, {})


def cmd_simulate_mc(args):
    pot = _potential(args)
    cfg = _sim_config(args)
    if args.save_dataset:
        t0 = time.perf_counter()
        batch = simulate(pot, None, cfg, args.samples, keep_paths=True, threads=args.threads)
        _save_successes(batch, _output_path(args, args.save_dataset), pot, cfg, args.keep_noises)
        from .estimator import from_counts
        est = from_counts(int(batch.success.sum()), args.samples)
        est.wall_seconds = time.perf_counter() - t0
    else:
        est = monte_carlo_estimate(pot, cfg, args.samples, threads=args.threads)
    _emit_estimate(args, est, "monte carlo")
    _manifest(args, args.out, pot, cfg, {})


def _emit_estimate(args, est, label):
    with open(os.path.join(args.out, "estimate.csv"), "w") as fh:
        fh.write(est.to_csv())
    text = est.summary(label)
    with open(os.path.join(args.out, "summary.txt"), "w") as fh:
        fh.write(text + "\n")
    print(text)


def cmd_estimate(args):
    pot = _potential(args)
    cfg = _sim_config(args)
    inputs: dict = {}
    bias = _load_bias(args, inputs)
    if bias is None:
        raise UsageError("estimate needs --checkpoint or --bias-field")
    if args.save_dataset:
        batch = simulate(pot, bias, cfg, args.samples, keep_paths=True, threads=args.threads)
        _save_successes(batch, _output_path(args, args.save_dataset), pot, cfg, args.keep_noises)
    est = importance_estimate(bias, pot, cfg, args.samples, threads=args.threads)
    _emit_estimate(args, est, "importance sampling")
    _manifest(args, args.out, pot, cfg, {"inputs": inputs})


def _checkpoint_writer(out):
    def write(step, net):
        save_checkpoint(net, os.path.join(out, f"checkpoint_{step:05d}.bin"))
    return write


def cmd_train_explore(args):
    pot = _potential(args)
    cfg = _sim_config(args)
    tc = _train_config(args)
    net, report = train_explore(pot, cfg, tc, on_checkpoint=_checkpoint_writer(args.out), threads=args.threads)
    digest = save_checkpoint(net, os.path.join(args.out, "checkpoint.bin"))
    report.write_csv(os.path.join(args.out, "train_report.csv"))
    last = report.records[-1] if report.records else None
    print(f"trained {tc.steps} steps; divergent steps {report.divergent_steps}; "
          f"final batch success rate {last.success_rate if last else float('nan'):.3f}")
    _manifest(args, args.out, pot, cfg, {"train": tc.to_dict(), "checkpoint_sha256": digest})


def cmd_train_combine(args):
    pot = _potential(args)
    cfg = _sim_config(args)
    tc = _train_config(args)
    if not args.dataset:
        raise UsageError("train-combine needs at least one --dataset")
    paths = [_require_file(p, "dataset") for p in args.dataset]
    _, records, counts = merge_datasets(paths)
    trajs = [r.to_trajectory() for r in records if r.success]
    if not trajs:
        raise UsageError("datasets contain no successful trajectories")
    holdout = None
    if args.holdout_fraction > 0:
        rng = np.random.default_rng(np.random.SeedSequence(entropy=args.seed, spawn_key=(0x401D,)))
        perm = rng.permutation(len(trajs))
        k = int(round(args.holdout_fraction * len(trajs)))
        holdout = [trajs[i] for i in sorted(perm[:k])]
        trajs = [trajs[i] for i in sorted(perm[k:])]
    net, report = train_combine(trajs, pot, cfg, tc, holdout=holdout, on_checkpoint=_checkpoint_writer(args.out))
    digest = save_checkpoint(net, os.path.join(args.out, "checkpoint.bin"))
    report.write_csv(os.path.join(args.out, "train_report.csv"))
    if report.holdout_loss:
        _write_csv(os.path.join(args.out, "holdout.csv"), ("epoch", "holdout_loss"), list(enumerate(report.holdout_loss)))
    print(f"trained on {len(trajs)} paths (channels: {counts}); final loss {report.records[-1].loss:.4f}" if report.records else "no training steps")
    _manifest(args, args.out, pot, cfg, {"train": tc.to_dict(), "checkpoint_sha256": digest,
                                          "inputs": {p: _sha256(p) for p in paths}, "channels": counts})


def cmd_committor(args):
    pot = _potential(args)
    cfg = _sim_config(args)
    grid = GridSpec((args.box[0], args.box[1]), (args.box[2], args.box[3]), args.grid_n, args.grid_n)
    q = solve_committor(pot, cfg.temperature, cfg.start_near, cfg.target, cfg.delta, grid, args.tol)
    if args.q_min == "ring":
        q_min = ring_floor(q, cfg.start_near, cfg.delta)
    else:
        q_min = float(args.q_min)
    gt = ground_truth_bias(q, cfg.temperature, q_min)
    q.save(os.path.join(args.out, "committor.csv"))
    gt.save(os.path.join(args.out, "gt_bias.csv"))
    print(f"committor solved on {args.grid_n}x{args.grid_n} grid; residual {q.residuals[-1]:.2e}; q_min {q_min:.3e}")
    _manifest(args, args.out, pot, cfg, {"q_min_used": q_min})


def ring_floor(q: GridField, center, delta: float) -> float:
    """Smallest committor value on grid nodes in the ring ``delta <= |x - center| < 2 delta``."""
    X, Y = np.meshgrid(q.xs, q.ys)
    r = np.hypot(X - center[0], Y - center[1])
    ring = (r >= delta) & (r < 2 * delta) & (q.values > 0)
    if not ring.any():
        ring = q.values > 0
    return float(q.values[ring].min())


def cmd_scaling(args):
    pot = _potential(args)
    cfg = _sim_config(args)
    inputs: dict = {}
    bias = _load_bias(args, inputs)
    if bias is None:
        raise UsageError("scaling needs --checkpoint or --bias-field")
    table = scaling_study(bias, pot, cfg, args.counts, replications=args.replications, threads=args.threads)
    with open(os.path.join(args.out, "scaling.csv"), "w") as fh:
        fh.write(table.to_csv())
    print(table.to_csv(), end="")
    _manifest(args, args.out, pot, cfg, {"inputs": inputs})


def cmd_export_plots(args):
    pot = _potential(args)
    cfg = _sim_config(args)
    inputs: dict = {}
    bias = _load_bias(args, inputs)
    base = make_potential(pot)
    (x0, x1, y0, y1) = args.box
    xs = np.linspace(x0, x1, args.lattice_n)
    ys = np.linspace(y0, y1, args.lattice_n)
    X, Y = np.meshgrid(xs, ys)
    pts = np.stack([X.ravel(), Y.ravel()], axis=1)
    cols = ["x", "y", "energy"]
    data = [pts[:, 0], pts[:, 1], base.energy(pts)]
    if bias is not None:
        cols.append("bias")
        data.append(bias.energy(pts))
    _write_csv(os.path.join(args.out, "bias_grid.csv"), cols, zip(*[d.tolist() for d in data]))

    if args.trajectories > 0:
        batch = simulate(pot, bias, cfg, args.trajectories, keep_paths=True, threads=args.threads)
        rows = []
        for i in range(len(batch)):
            t = batch[i]
            ch = classify_channel(t)
            for k, (x, y) in enumerate(t.positions):
                rows.append((int(t.index), k, float(x), float(y), int(t.success), ch))
        _write_csv(os.path.join(args.out, "trajectories.csv"), ("trajectory", "step", "x", "y", "success", "channel"), rows)
    print(f"wrote plot data to {args.out}")
    _manifest(args, args.out, pot, cfg, {"inputs": inputs})


# ------------------------------------------------------------------ parser

def _add_sim_flags(p):
    g = p.add_argument_group("simulation")
    g.add_argument("--potential", choices=["paper2d", "flat", "quadratic-well"], default="paper2d", help="energy surface (default paper2d)")
    g.add_argument("--tilt", type=float, default=0.05, help="linear y tilt of paper2d [energy/length] (default 0.05)")
    g.add_argument("--well-center", type=_pair, default=[0.0, 0.0], help="quadratic-well centre 'x,y' [length]")
    g.add_argument("--well-k", type=float, default=1.0, help="quadratic-well stiffness [energy/length^2]")
    g.add_argument("--temperature", type=float, default=1200.0, help="temperature T [K] (default 1200)")
    g.add_argument("--mass", type=float, default=1.0, help="particle mass m [dimensionless] (default 1)")
    g.add_argument("--gamma", type=float, default=1.0, help="damping gamma [1/time] (default 1)")
    g.add_argument("--dt", type=float, default=0.01, help="time step [time] (default 0.01)")
    g.add_argument("--n-steps", type=int, default=500, help="deadline N [steps] (default 500)")
    g.add_argument("--delta", type=float, default=0.05, help="capture/start radius delta [length] (default 0.05)")
    g.add_argument("--start", type=_pair, default=None, help="start minimum A 'x,y' [length] (default: located minimum, x<0)")
    g.add_argument("--target", type=_pair, default=None, help="target minimum B 'x,y' [length] (default: located minimum, x>0)")
    g.add_argument("--seed", type=int, default=0, help="master seed [integer] (default 0)")
    g.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker threads [count] (default: all cores)")


def _add_train_flags(p, steps_default=300):
    g = p.add_argument_group("training")
    g.add_argument("--batch-size", type=int, default=512, help="trajectories per step [count] (default 512)")
    g.add_argument("--steps", type=int, default=steps_default, help=f"optimisation steps [count] (default {steps_default})")
    g.add_argument("--learning-rate", type=float, default=1e-3, help="step size alpha [dimensionless] (default 1e-3)")
    g.add_argument("--optimizer", choices=["sgd", "adam"], default="adam", help="update rule (default adam)")
    g.add_argument("--r-start", type=float, default=1.0, help="initial indicator radius [length] (default 1.0)")
    g.add_argument("--r-end", type=float, default=0.05, help="final indicator radius [length] (default 0.05)")
    g.add_argument("--objective", choices=list(OBJECTIVES), default="cross_entropy",
                   help="exploration descent direction (default cross_entropy)")
    g.add_argument("--ce-weight", type=float, default=1.0, help="weight of the success likelihood term [dimensionless]")
    g.add_argument("--r-shape", choices=["linear", "cosine"], default="linear", help="radius schedule (default linear)")
    g.add_argument("--s", type=float, default=10.0, help="indicator scale s [energy] (default 10)")
    g.add_argument("--checkpoint-every", type=int, default=25, help="checkpoint interval [steps] (default 25)")
    g.add_argument("--hidden-widths", type=_int_list, default=[64, 64, 64, 64], help="hidden layer widths [units] (default 64,64,64,64)")
    g.add_argument("--feature-mode", choices=["raw", "with_control_features"], default="with_control_features", help="network inputs (default with_control_features)")
    g.add_argument("--negative-control-features", action="store_true", help="use exp(-|x-A|) instead of exp(+|x-A|)")


def _add_bias_flags(p):
    g = p.add_argument_group("bias")
    g.add_argument("--checkpoint", help="bias network checkpoint file")
    g.add_argument("--bias-field", help="grid bias CSV (e.g. gt_bias.csv from 'committor')")


def _add_common(p):
    p.add_argument("--out", default=".", help="output directory (created if missing)")
    p.add_argument("--manifest", help="re-run with the settings recorded in this manifest")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rarebias", description="Neural bias potentials and importance sampling for rare transitions.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("train-explore", help="train a bias network from scratch by rollouts")
    _add_sim_flags(p)
    _add_train_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_train_explore)

    p = sub.add_parser("train-combine", help="fit a bias network to stored successful paths")
    _add_sim_flags(p)
    _add_train_flags(p)
    p.add_argument("--dataset", action="append", help="trajectory dataset file (repeatable; merged; required)")
    p.add_argument("--holdout-fraction", type=float, default=0.0, help="fraction of paths held out [0-1] (default 0)")
    _add_common(p)
    p.set_defaults(func=cmd_train_combine)

    p = sub.add_parser("simulate-mc", help="plain Monte Carlo estimate under the unbiased dynamics")
    _add_sim_flags(p)
    p.add_argument("--samples", type=int, default=100000, help="number of trajectories M [count]")
    p.add_argument("--save-dataset", help="write successful paths to this dataset file (relative paths are under --out)")
    p.add_argument("--keep-noises", action="store_true", help="store noises alongside positions")
    _add_common(p)
    p.set_defaults(func=cmd_simulate_mc)

    p = sub.add_parser("estimate", help="importance-sampling estimate under a bias")
    _add_sim_flags(p)
    _add_bias_flags(p)
    p.add_argument("--samples", type=int, default=5120, help="number of biased trajectories M [count] (default 5120)")
    p.add_argument("--save-dataset", help="write successful paths to this dataset file (relative paths are under --out)")
    p.add_argument("--keep-noises", action="store_true", help="store noises alongside positions")
    _add_common(p)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("committor", help="solve the committor equation and build the grid bias")
    _add_sim_flags(p)
    p.add_argument("--grid-n", type=int, default=201, help="grid nodes per axis [count] (default 201)")
    p.add_argument("--box", type=float, nargs=4, default=[-2.0, 2.0, -2.0, 2.0], metavar=("X0", "X1", "Y0", "Y1"), help="domain [length]")
    p.add_argument("--tol", type=float, default=1e-10, help="relative residual tolerance (default 1e-10)")
    p.add_argument("--q-min", default="1e-12", help="committor floor before taking the log, or 'ring' (default 1e-12)")
    _add_common(p)
    p.set_defaults(func=cmd_committor)

    p = sub.add_parser("scaling", help="estimator spread/ESS/time versus sample count")
    _add_sim_flags(p)
    _add_bias_flags(p)
    p.add_argument("--counts", type=_int_list, default=[640, 1280, 2560, 5120, 10240], help="increasing sample counts [count]")
    p.add_argument("--replications", type=int, default=20, help="independent runs per count [count] (default 20)")
    _add_common(p)
    p.set_defaults(func=cmd_scaling)

    p = sub.add_parser("export-plots", help="write CSV data for bias-surface and trajectory plots")
    _add_sim_flags(p)
    _add_bias_flags(p)
    p.add_argument("--lattice-n", type=int, default=81, help="lattice points per axis [count] (default 81)")
    p.add_argument("--box", type=float, nargs=4, default=[-2.0, 2.0, -2.0, 2.0], metavar=("X0", "X1", "Y0", "Y1"), help="lattice extent [length]")
    p.add_argument("--trajectories", type=int, default=0, help="trajectories to roll out for overlays [count]")
    _add_common(p)
    p.set_defaults(func=cmd_export_plots)

    p = sub.add_parser("find-minima", help="locate energy minima")
    _add_sim_flags(p)
    p.add_argument("--grid-n", type=int, default=20, help="seed grid per axis [count] (default 20)")
    p.add_argument("--tol", type=float, default=1e-8, help="gradient-norm tolerance [energy/length] (default 1e-8)")
    p.add_argument("--box", type=float, nargs=4, default=[-2.0, 2.0, -2.0, 2.0], metavar=("X0", "X1", "Y0", "Y1"), help="search box [length]")
    _add_common(p)
    p.set_defaults(func=cmd_find_minima)
    return parser


def _apply_manifest(args):
    m = read_manifest(_require_file(args.manifest, "manifest"))
    if m.get("command") != args.command:
        raise UsageError(f"manifest records command {m.get('command')!r}, not {args.command!r}")
    for k, v in m.get("args", {}).items():
        if k not in REPLAY_SKIP:
            setattr(args, k, v)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.manifest:
            _apply_manifest(args)
        os.makedirs(args.out, exist_ok=True)
        args.func(args)
    except UsageError as exc:
        print(f"rarebias {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RareBiasError, FloatingPointError, OSError) as exc:
        print(f"rarebias {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def run(argv) -> int:
    return main(argv)


if __name__ == "__main__":
    sys.exit(main())
