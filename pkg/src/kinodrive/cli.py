"""Command line: ``run``, ``eval``, ``plot`` and ``selftest``."""

import argparse
import logging
import os
import sys

from .config import ConfigError, parse_config


def cmd_run(args):
    cfg = parse_config(args.config)
    from .experiment import run_experiment
    return run_experiment(cfg)


def cmd_eval(args):
    cfg = parse_config(args.config)
    from .experiment import eval_policy, format_summary
    dump = None
    if args.dump:
        os.makedirs(cfg.output_dir, exist_ok=True)
        stem = os.path.splitext(os.path.basename(args.checkpoint))[0]
        dump = os.path.join(cfg.output_dir, f"{stem}_traj.csv")
    summary = eval_policy(args.checkpoint, cfg, args.episodes, dump=dump)
    print(format_summary(summary))
    if dump:
        print(f"trajectories written to {dump}")
    return 0


def cmd_plot(args):
    from .plotting import plot_compare, plot_png
    plot_compare(args.csv, args.output, log_x=args.log_x)
    png = os.path.splitext(args.output)[0] + ".png"
    plot_png(args.csv, png, log_x=args.log_x)
    print(args.output)
    print(png)
    return 0


def cmd_selftest(args):
    from .selftest import run_selftest
    ok, _, elapsed = run_selftest()
    print(f"selftest {'passed' if ok else 'FAILED'} in {elapsed:.1f} s")
    return 0 if ok else 1


def build_parser():
    p = argparse.ArgumentParser(prog="kinodrive", description="Model-based and model-free driving policy learning")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train every seed of an experiment config")
    r.add_argument("config")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="evaluate a checkpoint with deterministic actions")
    e.add_argument("checkpoint")
    e.add_argument("config")
    e.add_argument("--episodes", type=int, default=None, help="default: eval_episodes from the config")
    e.add_argument("--dump", action="store_true", help="write a per-step trajectory CSV to output_dir")
    e.set_defaults(func=cmd_eval)

    pl = sub.add_parser("plot", help="compare training logs in an SVG line chart (plus a PNG beside it)")
    pl.add_argument("csv", nargs="+")
    pl.add_argument("-o", "--output", required=True)
    pl.add_argument("--log-x", action="store_true")
    pl.set_defaults(func=cmd_plot)

    s = sub.add_parser("selftest", help="run the oracle suite")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "episodes", 0) is None:
        args.episodes = parse_config(args.config).experiment.eval_episodes
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
