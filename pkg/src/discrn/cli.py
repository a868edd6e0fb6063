"""Command-line entry point.

    discrn run CONFIG [--seed S] [--out DIR] [--threads T] [--trace-inner]
    discrn compare DIR [--tau 0.05]
    discrn oracle-check CONFIG [--seed S] [--solves N]

Exit status is 0 on success, 2 for configuration errors and 3 for numerical
failures (including an oracle check that does not pass).
"""

import argparse
import logging
import sys

from . import harness
from .errors import ConfigError, NumericalError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


def _cmd_run(args):
    cfg = harness.load_config(args.config, seed=args.seed, out=args.out, threads=args.threads)
    res = harness.run_experiment(cfg, trace=args.trace_inner)
    for m, rep in res.comparison.items():
        flag = "" if rep.detected else "  (plateau not detected)"
        print(f"{m:9s} final F_hat {res.F_hat[m][-1]:.6g}  disagreement "
              f"{res.disagreement[m][-1]:.3e}  iterations to plateau {rep.iterations} "
              f"(x{rep.ratio:.2f}){flag}")
    print(f"wrote {res.out}")
    return EXIT_OK


def _cmd_compare(args):
    try:
        rep, records = harness.compare_dir(args.dir, args.tau)
    except FileNotFoundError as e:
        raise ConfigError(str(e), field="dir") from e
    print(f"{'method':9s} {'plateau':>14s} {'iters':>6s} {'ratio':>7s} {'final dis.':>11s}")
    for m, r in rep.items():
        flag = "" if r.detected else "  plateau not detected"
        print(f"{m:9s} {r.plateau:14.6g} {r.iterations:6d} {r.ratio:7.2f} "
              f"{records[m]['disagreement'][-1]:11.3e}{flag}")
    return EXIT_OK


def _cmd_oracle_check(args):
    cfg = harness.load_config(args.config, seed=args.seed)
    chk = harness.oracle_check(cfg, solves=args.solves)
    print(f"{chk.solves} solves: max |p - p*| = {chk.max_error:.3e} (delta {chk.delta:g}), "
          f"max feasibility gap {chk.max_feasibility_gap:.1e}, "
          f"iteration-bound violations {chk.bound_violations}")
    print("PASS" if chk.ok else "FAIL")
    return EXIT_OK if chk.ok else EXIT_NUMERICAL


def build_parser():
    ap = argparse.ArgumentParser(prog="discrn", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment from a YAML config")
    run.add_argument("config")
    run.add_argument("--seed", type=int, help="master seed (overrides experiment.seed)")
    run.add_argument("--out", help="output directory (overrides experiment.out)")
    run.add_argument("--threads", type=int, help="parallel inner solves per batch")
    run.add_argument("--trace-inner", action="store_true",
                     help="also write inner_trace.csv for the first inner solve")
    run.set_defaults(func=_cmd_run)

    cmp_ = sub.add_parser("compare", help="iterations-to-plateau table for a run directory")
    cmp_.add_argument("dir")
    cmp_.add_argument("--tau", type=float, default=0.05)
    cmp_.set_defaults(func=_cmd_compare)

    chk = sub.add_parser("oracle-check", help="check inner solves against the exact oracle")
    chk.add_argument("config")
    chk.add_argument("--seed", type=int)
    chk.add_argument("--solves", type=int, default=20)
    chk.set_defaults(func=_cmd_oracle_check)
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as e:
        print(f"numerical failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
