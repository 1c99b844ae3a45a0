"""Command-line entry point: ``saddle-cl <subcommand>`` or ``python -m saddle_cl``.

Exit codes: 0 success, 1 config error, 2 run failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional, Sequence

import numpy as np

from .bench import (ArtifactError, ConfigError, ExperimentError, defaults_table,
                    emit_trajectory, load_config, parse_assignments, run_experiment)
from .game import GAMES, StepSchedule, check_saddle, make_game, play_sequential_game
from .tensor import gradcheck

EXIT_OK, EXIT_CONFIG, EXIT_RUN = 0, 1, 2


def _overrides(pairs: Sequence[str]):
    out = []
    for item in pairs:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out.append((None, key.strip(), value.strip()))
    return out


def _cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
        if args.set:
            cfg = parse_assignments(_overrides(args.set), start=cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out or cfg.output_dir
    try:
        table = run_experiment(cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ExperimentError as exc:
        print(f"run failure: {exc}", file=sys.stderr)
        print(f"per-run error logs: {out}/runs/<run>/error.log", file=sys.stderr)
        return EXIT_RUN
    except (ArtifactError, OSError) as exc:
        print(f"run failure: {exc}", file=sys.stderr)
        return EXIT_RUN
    for method, scen, n, mean, std in table.summary_rows():
        print(f"{method:<16} {scen}  RA {100 * mean:6.2f} ± {100 * std:5.2f}  (n={n})")
    print(f"results written to {out}")
    return EXIT_OK


def _cmd_saddle_lab(args) -> int:
    try:
        game = make_game(args.game, args.dim)
        schedule = StepSchedule(args.alpha0, args.decay, args.c, args.d)
        x0 = np.full(args.dim, args.x0)
        theta0 = np.full(args.dim, args.theta0)
    except (KeyError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    cap = args.step_cap if args.step_cap > 0 else None
    try:
        traj = play_sequential_game(game, x0, theta0, schedule, args.iters, step_cap=cap)
        if args.out:
            emit_trajectory(traj, args.out)
    except (ArithmeticError, OSError) as exc:
        print(f"run failure: {exc}", file=sys.stderr)
        return EXIT_RUN
    last = traj.final
    cert = check_saddle(game, (last.x, last.theta), probes=args.probes, radius=args.radius)
    deltas = [m.delta for m in traj.leader_moves()]
    print(f"game {game.name}: {args.iters} iterations, final x={last.x.tolist()} "
          f"theta={last.theta.tolist()} H={last.H:.6g}")
    print(f"leader dH range [{min(deltas):.3g}, {max(deltas):.3g}]")
    print(f"saddle check ({args.probes} probes, radius {args.radius}): "
          f"{'holds' if cert.holds else 'violated'}, worst slack {cert.worst_violation:.3g}")
    if args.out:
        print(f"trajectory written to {args.out}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    report = gradcheck(args.draws, seed=args.seed)
    status = "pass" if report.passed else "FAIL"
    print(f"gradcheck {status}: {report.draws} draws, {report.components} components, "
          f"max abs error {report.worst_abs_error:.3g}")
    return EXIT_OK if report.passed else EXIT_RUN


def _cmd_print_defaults(args) -> int:
    sys.stdout.write(defaults_table())
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    # bad command lines are config errors, not run failures
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="saddle-cl", description=__doc__.splitlines()[0])
    p.add_argument("--print-defaults", action="store_true", help="print the config defaults table")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command")

    r = sub.add_parser("run", help="run an experiment from a config file")
    r.add_argument("config")
    r.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    r.add_argument("--out", help="output directory (default: output_dir from the config)")
    r.set_defaults(func=_cmd_run)

    s = sub.add_parser("saddle-lab", help="play the sequential game on an analytic payoff")
    s.add_argument("game", choices=sorted(GAMES))
    s.add_argument("--alpha0", type=float, default=0.05)
    s.add_argument("--decay", choices=("inverse", "exponential"), default="inverse")
    s.add_argument("--c", type=float, default=0.01, help="inverse decay rate")
    s.add_argument("--d", type=float, default=0.999, help="exponential decay factor")
    s.add_argument("--iters", type=int, default=5000)
    s.add_argument("--dim", type=int, default=1)
    s.add_argument("--x0", type=float, default=1.0)
    s.add_argument("--theta0", type=float, default=1.0)
    s.add_argument("--step-cap", type=float, default=0.25,
                   help="bound on the leader's step length relative to alpha; 0 disables it")
    s.add_argument("--probes", type=int, default=500)
    s.add_argument("--radius", type=float, default=0.1)
    s.add_argument("--out", help="write the trajectory CSV here")
    s.set_defaults(func=_cmd_saddle_lab)

    g = sub.add_parser("gradcheck", help="finite-difference check of the MLP gradients")
    g.add_argument("--draws", type=int, default=200)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=_cmd_gradcheck)

    d = sub.add_parser("print-defaults", help="print the config defaults table")
    d.set_defaults(func=_cmd_print_defaults)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.print_defaults:
        return _cmd_print_defaults(args)
    if args.command is None:
        parser.print_help()
        return EXIT_CONFIG
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
