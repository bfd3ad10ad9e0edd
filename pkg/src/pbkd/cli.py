"""Command-line entry point: ``pbkd <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure (a check
violated its tolerance or a solver produced non-finite values).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from pbkd.errors import ConfigInvalid, IncompatibleRuns, NonFinite, NonPositivePoint
from pbkd.harness import config as cfgmod
from pbkd.harness import presets, runner

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

PRESETS = {
    "offline": lambda: presets.reference_offline(),
    "online": lambda: presets.reference_online(),
}


def _cmd_gen_config(args: argparse.Namespace) -> int:
    text = cfgmod.dumps(cfgmod.validate(PRESETS[args.preset]()))
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = cfgmod.load(args.config)
    if args.seed is not None:
        cfg = cfgmod.validate(cfgmod.with_overrides(cfg, seed=args.seed))
    art = runner.run(cfg, args.out)
    print(art.directory)
    for k, v in art.metrics.items():
        print(f"{k}\t{v!r}")
    return EXIT_OK


def _cmd_sweep(args: argparse.Namespace) -> int:
    cfg = cfgmod.load(args.config)
    try:
        values = [int(v) for v in args.values.split(",")]
    except ValueError as exc:
        raise ConfigInvalid("values", "expected comma-separated integers") from exc
    res = runner.sweep(cfg, args.axis, values, args.seeds, args.out, args.jobs)
    print(res.directory)
    sys.stdout.write(runner.summary_csv(res))
    print(f"slope\t{res.fit.slope!r}")
    return EXIT_OK


def _cmd_compare(args: argparse.Namespace) -> int:
    report = runner.compare(args.runs, args.metric)
    for label in report.ordering:
        print(f"{label}\t{report.means[label]!r}")
    sys.stdout.write(report.to_csv())
    return EXIT_OK


def _cmd_diag(args: argparse.Namespace) -> int:
    from pbkd import diagnostics
    from pbkd.harness import checks

    rng = np.random.default_rng(args.seed)
    if args.check in ("l1tv", "tvlog"):
        fn = diagnostics.lemma_l1_tv_check if args.check == "l1tv" else diagnostics.lemma_tv_logexp_check
        report = fn(rng, args.trials)
        print("trial,lhs,rhs,margin,violation")
        for i, lhs, rhs, margin, bad in report.rows():
            print(f"{i},{lhs!r},{rhs!r},{margin!r},{int(bad)}")
        print(f"violations\t{report.violations}", file=sys.stderr)
        return EXIT_NUMERIC if report.violations else EXIT_OK
    if args.check == "pdl":
        pdl = checks.pdl_errors(rng, args.trials)
        bell = checks.bellman_errors(rng, args.trials)
        print(f"pdl_max_error\t{pdl.max()!r}\nbellman_max_error\t{bell.max()!r}")
        return EXIT_NUMERIC if pdl.max() > 1e-8 or bell.max() > 1e-10 else EXIT_OK
    errs = {
        "clipped": (checks.clipped_gradient_errors(rng, args.trials), 1e-4),
        "mle": (checks.mle_gradient_errors(rng, args.trials), 1e-6),
        "reward_step": (checks.reward_step_gradient_errors(rng, args.trials), 1e-4),
    }
    failed = False
    for name, (e, tol) in errs.items():
        print(f"{name}\t{e.max()!r}\t{'ok' if e.max() <= tol else 'FAIL'}")
        failed |= e.max() > tol
    return EXIT_NUMERIC if failed else EXIT_OK


def _cmd_rates(args: argparse.Namespace) -> int:
    from pbkd.diagnostics import rate_fit

    quantity, pts = runner.read_summary(args.input)
    if quantity != args.quantity:
        raise ConfigInvalid("quantity", f"summary holds {quantity!r}, not {args.quantity!r}")
    fit = rate_fit(pts)
    print(json.dumps({"quantity": quantity, "slope": fit.slope, "intercept": fit.intercept,
                      "residual_rms": fit.residual_rms}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pbkd", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-config", help="print a reference config")
    g.add_argument("--preset", choices=sorted(PRESETS), default="offline")
    g.add_argument("--output")
    g.set_defaults(fn=_cmd_gen_config)

    r = sub.add_parser("run", help="execute one config")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--out", help=f"output root (default ${cfgmod.OUT_ENV} or ./runs)")
    r.set_defaults(fn=_cmd_run)

    s = sub.add_parser("sweep", help="run a dataset-size or iteration ladder over seeds")
    s.add_argument("--config", required=True)
    s.add_argument("--axis", choices=["N", "T"], required=True)
    s.add_argument("--values", required=True)
    s.add_argument("--seeds", type=int, default=5)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out")
    s.set_defaults(fn=_cmd_sweep)

    c = sub.add_parser("compare", help="order runs by a seed-averaged metric")
    c.add_argument("--runs", nargs="+", required=True)
    c.add_argument("--metric", choices=sorted(runner.METRICS), default="j_rstar")
    c.set_defaults(fn=_cmd_compare)

    d = sub.add_parser("diag", help="randomized numerical checks")
    d.add_argument("--check", choices=["l1tv", "tvlog", "pdl", "gradients"], required=True)
    d.add_argument("--trials", type=int, default=None)
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(fn=_cmd_diag)

    t = sub.add_parser("rates", help="fit a log-log slope to a sweep summary")
    t.add_argument("--input", required=True)
    t.add_argument("--quantity", choices=["subopt", "regret"], required=True)
    t.set_defaults(fn=_cmd_rates)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "trials", 0) is None:
        args.trials = {"l1tv": 1000, "tvlog": 1000, "pdl": 100, "gradients": 50}[args.check]
    try:
        return args.fn(args)
    except (ConfigInvalid, IncompatibleRuns) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFinite, NonPositivePoint, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
