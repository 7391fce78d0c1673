"""Command-line entry point.

Exit status: 0 when every requested check passes, 1 when a check fails (the
failing checks are named on stderr), 2 on configuration or input errors,
reported as a single ``<Code>: message`` line on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import control_variates as cv
from . import lab
from .config import parse_config
from .errors import CVGradLabError
from .exact import exact_values
from .mdp import SoftmaxPolicy, load_mdp, parse_mdp

SUBCOMMANDS = ("run", "check-unbiased", "check-ordering", "check-null", "solve-lambda", "show-mdp")


def _common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
    p.add_argument("--config", required=config_required, help="experiment config (JSON) or bundled name")
    p.add_argument("--out", default="reports", help="output directory (default: %(default)s)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field; repeatable")
    p.add_argument("--seed", type=int, help="override master_seed")
    p.add_argument("--exact", action="store_true", help="force enumeration mode; error if over budget")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cvgradlab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    _common(sub.add_parser("run", help="run the full experiment and write report + CSV"))
    _common(sub.add_parser("check-unbiased", help="unbiasedness of every configured estimator"))
    _common(sub.add_parser("check-ordering", help="variance ordering AAC<=TDAC, QAC<=REINFORCE"))
    _common(sub.add_parser("check-null", help="zero mean of the score-weighted sum for phi in {1, V}"))
    _common(sub.add_parser("solve-lambda", help="fit the combined estimator's coefficients on pilot draws"))
    show = sub.add_parser("show-mdp", help="print an MDP and its exact values")
    _common(show, config_required=False)
    show.add_argument("--mdp", help="MDP file path or bundled name")
    show.add_argument("--inline", help="MDP description as a JSON string")
    return parser


def _config(args):
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"master_seed={args.seed}")
    if args.exact:
        overrides.append("exact=true")
    return parse_config(args.config, overrides)


def _finish(result: lab.ExperimentResult, args, prefix: str) -> int:
    report, csv_path = lab.write_reports(result, args.out, prefix)
    for c in result.checks:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name} [{c.mode}]")
    print(f"report: {report}")
    print(f"csv: {csv_path}")
    failed = result.failed_checks()
    if failed:
        print(f"check failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def _cmd_run(args) -> int:
    config = _config(args)
    return _finish(lab.run_experiment(config), args, "report")


def _cmd_check(args, name: str) -> int:
    config = _config(args)
    if config.exact:
        result = lab.exact_only_result(config, [name])
    elif name == "null":
        # the null-term check is enumeration-only
        result = lab.exact_only_result(config, [name])
    else:
        result = lab.run_experiment(config, [name])
    if not result.checks:
        print(f"no {name} check could be run for this configuration", file=sys.stderr)
        return 1
    return _finish(result, args, f"check-{name}")


def _cmd_solve_lambda(args) -> int:
    config = _config(args)
    mdp = lab.load_experiment_mdp(config)
    policy = SoftmaxPolicy.for_mdp(mdp, lab.initial_theta(config, mdp))
    tables = exact_values(mdp, policy)
    basis = cv.make_basis(config.basis_spec, tables, mdp, policy)
    fit = cv.fit_combined(mdp, policy, tables, basis, config.n_pilot, config.master_seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "config": config.to_dict(),
        "basis": list(basis.labels),
        "degraded": fit.degraded,
        "solutions": [{"coord": j, **(s.to_dict() if s else {"lambda": None})} for j, s in enumerate(fit.solutions)],
    }
    path = out / f"lambda-{lab.config_hash(config)}.json"
    path.write_text(json.dumps(doc, indent=2, allow_nan=False) + "\n", encoding="utf-8")
    for j, s in enumerate(fit.solutions):
        if s is None:
            print(f"coord {j}: singular Gram, lambda = 0")
        else:
            lam = ", ".join(f"{x:.6g}" for x in s.lam)
            print(f"coord {j}: lambda = [{lam}]  var {s.variance_before:.6g} -> {s.variance_after:.6g}")
    print(f"lambda: {path}")
    return 0


def _cmd_show_mdp(args) -> int:
    if args.inline:
        mdp = parse_mdp(args.inline)
    elif args.mdp:
        mdp = load_mdp(args.mdp)
    elif args.config:
        mdp = lab.load_experiment_mdp(_config(args))
    else:
        raise CVGradLabError("show-mdp needs --mdp, --inline or --config")
    policy = SoftmaxPolicy.zeros(mdp)
    tables = exact_values(mdp, policy)
    np.set_printoptions(precision=6, suppress=True)
    print(f"states={mdp.n_states} actions={mdp.n_actions} gamma={mdp.gamma} horizon={mdp.horizon}")
    print(f"initial_dist={mdp.initial_dist}")
    print(f"reward=\n{mdp.reward}")
    print(f"V[0] under the uniform policy = {tables.v[0]}")
    print(f"J = {float(mdp.initial_dist @ tables.v[0]):.12g}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "check-unbiased":
            return _cmd_check(args, "unbiased")
        if args.command == "check-ordering":
            return _cmd_check(args, "ordering")
        if args.command == "check-null":
            return _cmd_check(args, "null")
        if args.command == "solve-lambda":
            return _cmd_solve_lambda(args)
        return _cmd_show_mdp(args)
    except CVGradLabError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"FileNotFound: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"InvalidInput: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
