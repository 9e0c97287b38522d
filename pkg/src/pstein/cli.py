"""Command-line reproduction driver.

Subcommands: ``run`` executes an experiment matrix from a JSON config,
``eigen`` writes the curvature eigenvalue decay report, ``oracle``
generates the pCN reference moments, and ``check`` runs the invariant
smoke suite.  Flags override config-file values, which override defaults.
"""

import argparse
import json
import sys
import traceback

from .exceptions import ConfigInvalid
from .experiments import (ExperimentConfig, check_suite, eigen_report,
                          oracle_report, run_experiment)


def _int_list(text):
    return [int(tok) for tok in text.split(",") if tok]


def _str_list(text):
    return [tok for tok in text.split(",") if tok]


def _add_config_flags(parser):
    parser.add_argument("-c", "--config", help="JSON config (or manifest) file")
    parser.add_argument("--problem", choices=["linear1d", "lognormal1d"])
    parser.add_argument("--method", dest="methods", type=_str_list,
                        help="comma-separated: svgd,svn,psvn")
    parser.add_argument("--dim", dest="dims", type=_int_list,
                        help="comma-separated dimensions")
    parser.add_argument("--particles", type=_int_list,
                        help="comma-separated particle counts")
    parser.add_argument("--trials", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--workers", type=int)
    parser.add_argument("--eps-lambda", dest="eps_lambda", type=float)
    parser.add_argument("--iterations", type=int)
    parser.add_argument("--output")


def _load_config(args, extra=None):
    raw = {}
    if args.config:
        with open(args.config) as fh:
            raw = json.load(fh)
    overrides = {key: getattr(args, key, None)
                 for key in ("problem", "methods", "dims", "particles",
                             "trials", "seed", "workers", "eps_lambda",
                             "iterations", "output")}
    if extra:
        overrides.update(extra)
    return ExperimentConfig.from_dict(raw, overrides)


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="pstein",
        description="Projected Stein variational Newton experiment driver")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment matrix")
    _add_config_flags(p_run)

    p_eig = sub.add_parser("eigen", help="eigenvalue decay report")
    _add_config_flags(p_eig)

    p_oracle = sub.add_parser("oracle", help="pCN reference moments")
    _add_config_flags(p_oracle)
    p_oracle.add_argument("--steps", type=int, default=200000)
    p_oracle.add_argument("--beta", type=float, default=0.2)
    p_oracle.add_argument("--chains", type=int, default=4)
    p_oracle.add_argument("--thin", type=int, default=20)

    sub.add_parser("check", help="invariant smoke suite")

    args = parser.parse_args(argv)
    try:
        if args.command == "check":
            failures = 0
            for name, passed, detail in check_suite():
                status = "OK  " if passed else "FAIL"
                print(f"[{status}] {name}" + (f" ({detail})" if detail else ""))
                failures += 0 if passed else 1
            return 1 if failures else 0
        if args.command == "run":
            cfg = _load_config(args)
            outdir = run_experiment(cfg)
            print(f"artifacts written to {outdir}")
            return 0
        if args.command == "eigen":
            cfg = _load_config(args)
            outdir = eigen_report(cfg)
            print(f"eigenvalue report written to {outdir}")
            return 0
        if args.command == "oracle":
            cfg = _load_config(args, extra={"problem": args.problem
                                            or "lognormal1d"})
            outdir, rhat = oracle_report(cfg, steps=args.steps,
                                         beta=args.beta, chains=args.chains,
                                         thin=args.thin)
            rhat_text = "n/a" if rhat is None else f"{rhat:.4f}"
            print(f"oracle moments written to {outdir} (rhat {rhat_text})")
            return 0
    except ConfigInvalid as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return 2
    except Exception:  # noqa: BLE001 - CLI boundary
        traceback.print_exc()
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
