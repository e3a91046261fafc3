"""Command-line front end.

Subcommands: train, verify, sweep, summarize, plot. The worker pool size
follows --workers, capped by the QFACTOR_THREADS environment variable.
"""

from __future__ import annotations

import os

# Many tiny matrix products: pinning BLAS to one thread is faster and keeps
# worker processes from oversubscribing the machine. Must happen before the
# first numpy import.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import glob
import sys


def _cmd_train(args) -> int:
    from . import harness

    mapping = harness.load_config_file(args.config)
    cfg = harness.config_from_mapping(mapping)
    if args.seed is not None:
        cfg.seeds = [args.seed]
    if args.out:
        cfg.output_dir = args.out
    print(f"training {cfg.algo} on {cfg.env_name} "
          f"(seeds {cfg.seeds}, {cfg.train.total_steps} steps)")
    outputs = harness.run_experiment(cfg, workers=args.workers)
    for csv_path, ckpt_path in outputs:
        print(f"  wrote {csv_path} and {ckpt_path}")
    return 0


def _cmd_verify(args) -> int:
    from . import harness, verifier
    from .agents import Assembly

    if args.payoff:
        from .envs import PayoffTable
        table = PayoffTable.load(args.payoff)
        winners, best = verifier.oracle_optimal(table.rewards)
        print(f"payoff table: {table.n_agents} agents x {table.n_actions} actions")
        print(f"optimal joint actions: {winners} (value {best:.6g})")
        return 0

    asm = Assembly.load(args.checkpoint)
    mapping = harness.load_config_file(args.env_config)
    cfg = harness.config_from_mapping(mapping)
    env = harness.make_env_factory(cfg)(None)
    tab = verifier.tabulate(asm, env)
    rep1 = verifier.check_factorization(tab, tol=args.tol)
    rep2 = verifier.check_min_consistency(tab, tol=args.tol)
    print(verifier.format_report(rep1))
    print()
    print(verifier.format_report(rep2))
    out = args.out or (args.checkpoint + ".report.txt")
    kv = verifier.report_to_mapping(rep1)
    kv.update({f"min_consistency.{k}": v
               for k, v in verifier.report_to_mapping(rep2).items()})
    with open(out, "w") as f:
        f.write(harness.serialize_config(kv))
    print(f"\nwrote {out}")
    return 0 if rep1.satisfied else 3


def _cmd_sweep(args) -> int:
    from . import harness

    summary = harness.random_matrix_study(args.random_matrices, args.steps,
                                          args.seed, workers=args.workers)
    for line in summary.lines():
        print(line)
    if args.out:
        with open(args.out, "w") as f:
            f.write("\n".join(summary.lines()) + "\n")
        print(f"wrote {args.out}")
    return 0


def _expand(pattern: str) -> list[str]:
    paths = sorted(glob.glob(pattern))
    if not paths:
        raise SystemExit(f"no files match {pattern!r}")
    return paths


def _cmd_summarize(args) -> int:
    from . import harness

    rows = harness.summarize(_expand(args.glob))
    print(harness.format_summary(rows))
    if args.out:
        harness.write_summary_csv(args.out, rows)
        print(f"wrote {args.out}")
    return 0


def _cmd_plot(args) -> int:
    from . import harness

    harness.write_plot(_expand(args.glob), args.out)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="qfactor",
        description="Train and verify cooperative value-factorization methods.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run one experiment config")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int, default=None,
                   help="train only this seed (overrides config)")
    t.add_argument("--out", default=None, help="override output directory")
    t.add_argument("--workers", type=int, default=None)
    t.set_defaults(fn=_cmd_train)

    v = sub.add_parser("verify", help="check factorization conditions")
    v.add_argument("--checkpoint")
    v.add_argument("--env-config")
    v.add_argument("--payoff", help="inspect a payoff table file instead")
    v.add_argument("--tol", type=float, default=0.1,
                   help="residual tolerance for learned networks")
    v.add_argument("--out", default=None, help="report file path")
    v.set_defaults(fn=_cmd_verify)

    s = sub.add_parser("sweep", help="random-matrix comparison study")
    s.add_argument("--random-matrices", type=int, required=True)
    s.add_argument("--steps", type=int, default=20000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--workers", type=int, default=None)
    s.add_argument("--out", default=None)
    s.set_defaults(fn=_cmd_sweep)

    m = sub.add_parser("summarize", help="mean and 95% CI across seeds")
    m.add_argument("--glob", required=True)
    m.add_argument("--out", default=None)
    m.set_defaults(fn=_cmd_summarize)

    g = sub.add_parser("plot", help="SVG line chart from metric CSVs")
    g.add_argument("--glob", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=_cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "verify" and not args.payoff:
        if not (args.checkpoint and args.env_config):
            print("verify needs --checkpoint and --env-config (or --payoff)",
                  file=sys.stderr)
            return 2
    try:
        return args.fn(args)
    except Exception as e:  # surface a clean one-line failure to scripts
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
