"""Command-line front end: ``relvel run | verify | analyze | convergence``."""

from __future__ import annotations

import argparse
import os
import sys

from .config import ConfigError, parse_config, parse_grid, parse_rates
from .scheme import DensityUnderflowError, InstabilityError, VelocityFieldPolicy

EXIT_OK, EXIT_FAIL, EXIT_UNSTABLE = 0, 1, 2


def _add_scheme_flags(p, with_grid=True):
    if with_grid:
        p.add_argument("--grid", help="grid extents, e.g. 64x64")
    p.add_argument("--basis", help="moment basis (d2q9-orthogonal, d2q9-geier-diagonal, d2q9-geier-raw)")
    p.add_argument("--policy", help="relative velocity: zero | fluid | constant:cx,cy")
    p.add_argument("--rates", help="non-conserved relaxation rates s3,...,s8")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="relvel", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one simulation and write its artifacts")
    p.add_argument("config", nargs="?", help="JSON configuration file")
    _add_scheme_flags(p)
    p.add_argument("--scheme", choices=("relative", "cascaded"))
    p.add_argument("--preset", help="initial condition preset name")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("verify", help="exact and numerical identity checks")
    p.add_argument("check", choices=("morphism", "blocks", "cascaded", "lambda", "conservation"))
    p.add_argument("--basis", default="d2q9-orthogonal")
    p.add_argument("--samples", type=int)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("analyze", help="residual diagnostics from run directories")
    p.add_argument("dirs", nargs="+", help="run output directories (one per resolution)")
    p.add_argument("--out", default="diagnostics", help="output prefix for .csv and .json")

    p = sub.add_parser("convergence", help="Taylor-Green refinement study")
    _add_scheme_flags(p, with_grid=False)
    p.add_argument("--grids", default="32,64,128")
    p.add_argument("--time", type=float, default=0.5, help="physical time of the measurement")
    p.add_argument("--u0", type=float, default=0.005, help="vortex amplitude in units of lambda")
    p.add_argument("--density", choices=("pressure", "uniform"), default="pressure")
    p.add_argument("--compare", help="second policy for the field-difference study")
    p.add_argument("--out", default="convergence", help="output prefix for .csv and .json")
    return parser


def _cmd_run(args) -> int:
    from .experiments import run_experiment

    overrides = {
        "grid": parse_grid(args.grid) if args.grid else None,
        "basis": args.basis, "policy": args.policy, "scheme": args.scheme,
        "rates": parse_rates(args.rates) if args.rates else None,
        "steps": args.steps, "seed": args.seed, "out": args.out,
        "preset": {"name": args.preset} if args.preset else None,
    }
    cfg = parse_config(args.config, overrides)
    log = None if args.quiet else (lambda msg: print(msg, file=sys.stderr))
    run_experiment(cfg, log)
    print(f"wrote {cfg.out}")
    return EXIT_OK


def _cmd_verify(args) -> int:
    from .experiments import VERIFY

    fn = VERIFY[args.check]
    kwargs = {}
    if args.check in ("morphism", "lambda", "conservation"):
        kwargs["basis"] = args.basis
    if args.check in ("cascaded", "lambda", "conservation"):
        kwargs["seed"] = args.seed
        if args.samples is not None:
            kwargs["samples" if args.check != "conservation" else "steps"] = args.samples
    res = fn(**kwargs)
    for line in res.lines:
        print(line)
    print(f"{res.name}: {'PASS' if res.passed else 'FAIL'}")
    return EXIT_OK if res.passed else EXIT_FAIL


def _write_report(rep, prefix):
    rep.write_csv(prefix + ".csv")
    rep.write_json(prefix + ".json")
    for q, info in sorted(rep.slopes.items()):
        s = info["slope"]
        print(f"{q:<36} slope {'n/a' if s is None else f'{s:.3f}'}")
    print(f"wrote {prefix}.csv and {prefix}.json")


def _cmd_analyze(args) -> int:
    from .experiments import analyze_dirs

    _write_report(analyze_dirs(args.dirs), args.out)
    return EXIT_OK


def _cmd_convergence(args) -> int:
    from .config import DEFAULTS
    from .experiments import convergence_study
    from .presets import TaylorGreen

    rates = parse_rates(args.rates) if args.rates else DEFAULTS["rates"]
    grids = [int(g) for g in args.grids.split(",")]
    policy = args.policy or "zero"
    for pol in (policy, args.compare):
        if pol is not None:
            try:
                VelocityFieldPolicy.parse(pol)
            except ValueError as exc:
                raise ConfigError("--policy", str(exc)) from None
    tg = TaylorGreen(args.u0, density=args.density)
    rep = convergence_study(grids, args.time, rates, args.basis or "d2q9-orthogonal", policy,
                            args.compare, tg)
    out_dir = os.path.dirname(args.out)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    _write_report(rep, args.out)
    return EXIT_OK


COMMANDS = {"run": _cmd_run, "verify": _cmd_verify, "analyze": _cmd_analyze,
            "convergence": _cmd_convergence}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except InstabilityError as exc:
        print(f"error: run became unstable at step {exc.step}", file=sys.stderr)
        return EXIT_UNSTABLE
    except DensityUnderflowError as exc:
        print(f"error: density {exc.rho:.3e} at node {exc.node}", file=sys.stderr)
        return EXIT_UNSTABLE


if __name__ == "__main__":
    sys.exit(main())
