"""Command line entry points.

Subcommands: ``mesh gen``, ``data gen``, ``train``, ``eval``, ``ifenn``,
``sweep``, ``report``. Every run writes a manifest before exiting, also
on failure (with the failing stage recorded). Exit codes: 0 on success,
1 on a failed run, 2 on usage errors.

Relative output paths resolve against the ``IFENN_OUT_ROOT`` environment
variable when it is set.
"""

from __future__ import annotations

import argparse
import sys

from .defaults import NEWTON_MAX_ITERS, NEWTON_TOL, SNAPSHOT_LF, U_PEAK
from . import harness


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ifenn",
        description="Learned nonlocal-strain surrogates in finite element "
                    "analysis: data generation, training, embedding, studies.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    mesh = sub.add_parser("mesh", help="mesh utilities")
    mesh_sub = mesh.add_subparsers(dest="subcommand", required=True)
    mesh_gen = mesh_sub.add_parser("gen", help="generate the benchmark mesh")
    mesh_gen.add_argument("--n", type=int, required=True,
                          help="elements per side before notch removal")
    mesh_gen.add_argument("-o", "--out", required=True, help="output JSON file")

    data = sub.add_parser("data", help="training data utilities")
    data_sub = data.add_subparsers(dest="subcommand", required=True)
    data_gen = data_sub.add_parser(
        "gen", help="run the staggered reference solver and freeze a snapshot")
    data_gen.add_argument("--n", type=int, required=True)
    data_gen.add_argument("--u-peak", type=float, default=U_PEAK,
                          help="prescribed top-edge displacement at load factor 1")
    data_gen.add_argument("--lf", type=float, default=SNAPSHOT_LF,
                          help="load factor of the frozen snapshot")
    data_gen.add_argument("-o", "--out", required=True, help="output directory")

    train = sub.add_parser("train", help="train one network on a snapshot")
    train.add_argument("--layers", type=int, required=True)
    train.add_argument("--width", type=int, required=True)
    train.add_argument("--epochs", type=int, required=True)
    train.add_argument("--lr", type=float, required=True)
    train.add_argument("--seed", type=int, required=True)
    train.add_argument("--data", required=True, help="snapshot CSV path")
    train.add_argument("--lbfgs-iters", type=int, default=None,
                       help="second-stage iteration cap")
    train.add_argument("-o", "--out", required=True, help="output directory")

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a snapshot")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True, help="snapshot CSV path")
    ev.add_argument("-o", "--out", required=True, help="output directory")

    emb = sub.add_parser(
        "ifenn", help="embedded Newton solve with a trained checkpoint")
    emb.add_argument("--checkpoint", required=True)
    emb.add_argument("--n", type=int, required=True, help="mesh density")
    emb.add_argument("--lf", type=float, default=SNAPSHOT_LF)
    emb.add_argument("--u-peak", type=float, default=U_PEAK)
    emb.add_argument("--tol", type=float, default=NEWTON_TOL)
    emb.add_argument("--max-iters", type=int, default=NEWTON_MAX_ITERS)
    emb.add_argument("--reference", action="store_true",
                     help="also run the staggered reference and compare damage")
    emb.add_argument("-o", "--out", required=True, help="output directory")

    sweep = sub.add_parser("sweep", help="run a study sweep from a JSON config")
    sweep.add_argument("--config", required=True, help="sweep spec JSON")
    sweep.add_argument("--parallel", type=int, default=None,
                       help="override the spec's parallelism budget")
    sweep.add_argument("-o", "--out", required=True, help="output directory")

    rep = sub.add_parser("report", help="aggregate run manifests into a CSV")
    rep.add_argument("--runs", required=True, help="directory of run outputs")
    rep.add_argument("-o", "--out", required=True, help="summary CSV path")

    return parser


def _dispatch(args):
    if args.command == "mesh" and args.subcommand == "gen":
        mesh = harness.mesh_gen(args.n, args.out)
        print(f"mesh {mesh.meta['nx']}x{mesh.meta['ny']}: "
              f"{mesh.n_elements} elements, {mesh.n_nodes} nodes -> {args.out}")
    elif args.command == "data" and args.subcommand == "gen":
        snap = harness.data_gen(args.n, args.out, u_peak=args.u_peak, lf=args.lf)
        print(f"snapshot lf={args.lf}: {snap.n_interior} interior + "
              f"{snap.n_boundary} boundary rows -> {args.out}")
    elif args.command == "train":
        cfg = harness.RunConfig(
            layers=args.layers, width=args.width, epochs=args.epochs,
            lr=args.lr, seed=args.seed, snapshot=args.data, out_dir=args.out,
            **({"lbfgs_max_iters": args.lbfgs_iters}
               if args.lbfgs_iters is not None else {}),
        )
        manifest = harness.train_run(cfg)
        m = manifest["metrics"]
        print(f"trained {args.layers}x{args.width} seed {args.seed}: "
              f"J={m['j_lbfgs_end']['total']:.3e} "
              f"l2rse={m['eval_lbfgs_end']['l2rse']:.3e} -> {args.out}")
    elif args.command == "eval":
        manifest = harness.eval_run(args.checkpoint, args.data, args.out)
        ev = manifest["metrics"]["eval"]
        print(f"eval: l2rse={ev['l2rse']:.3e} "
              f"trivial={'yes' if ev['trivial_flag'] else 'no'} -> {args.out}")
    elif args.command == "ifenn":
        manifest = harness.ifenn_run(
            args.checkpoint, args.n, args.out, lf=args.lf, u_peak=args.u_peak,
            reference=args.reference, tol=args.tol, max_iters=args.max_iters)
        m = manifest["metrics"]
        line = (f"embedded solve: {m['iter_ifenn']} iterations, "
                f"d_max={m['d_max']:.3f}")
        if args.reference:
            line += f", damage L2 diff {m['reference']['damage_l2_diff']:.3e}"
        print(line + f" -> {args.out}")
    elif args.command == "sweep":
        spec = harness.SweepSpec.from_json(args.config)
        if args.parallel is not None:
            spec.parallelism = args.parallel
        if spec.study == "cross-mesh":
            rows = harness.run_cross_mesh_study(spec, args.out)
            print(f"cross-mesh study: {len(rows)} meshes -> {args.out}")
        else:
            rows, agg = harness.run_sweep(spec, args.out)
            print(f"{spec.study} sweep: {len(rows)} runs, "
                  f"{len(agg)} cells -> {args.out}")
    elif args.command == "report":
        agg = harness.report(args.runs, args.out)
        print(f"report: {len(agg)} aggregated cells -> {args.out}")
    else:  # pragma: no cover - argparse enforces the command set
        raise harness.HarnessError(f"unknown command {args.command!r}")
    return 0


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
