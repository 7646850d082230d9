"""Command-line interface: ``bayesmfa <command> --config FILE``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 missing upstream artifact.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import bundled_config_path, parse_config
from .errors import ConfigError, MFAError, MissingArtifactError, NonDissipativeCycleError, NumericalError
from .selection import IncompleteEnsembleError

log = logging.getLogger("bayesmfa")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_MISSING = 0, 2, 3, 4


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True,
                   help="run configuration JSON, or the name of a bundled case (steel, toy)")
    p.add_argument("--out", help="output directory (overrides the configuration)")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--particles", type=int, help="SMC particles per structure")
    p.add_argument("--ess-target", type=float, help="ESS fraction kept per tempering stage")
    p.add_argument("--mutation-steps", type=int, help="MCMC moves per stage")
    p.add_argument("--policy", choices=("exclude", "compact-support"),
                   help="treatment of records on connections a structure lacks")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bayesmfa", description="Bayesian model selection and averaging for MFA networks")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("enumerate", "list candidate structures and their prior probabilities"),
        ("infer", "run SMC for one or all structures"),
        ("select", "structure posterior and posterior-ratio table"),
        ("average", "model-averaged flows and Sankey document"),
        ("impact", "environmental impact and rectified intensities"),
        ("decide", "rank consumption-reduction options by risk appetite"),
        ("run", "every command in order"),
    ):
        p = sub.add_parser(name, help=help_)
        _common(p)
        if name in ("infer", "run"):
            p.add_argument("--jobs", type=int, default=1, help="structures run in parallel")
        if name == "infer":
            g = p.add_mutually_exclusive_group(required=True)
            g.add_argument("--structure", action="append", help="structure code (repeatable)")
            g.add_argument("--all", action="store_true", help="every candidate structure")
    return parser


def load(args) -> "pipeline.RunConfig":
    path = Path(args.config)
    if not path.exists() and args.config in ("steel", "toy"):
        path = bundled_config_path(args.config)
    overrides = {
        "seed": args.seed,
        "particles": args.particles,
        "ess_target": args.ess_target,
        "mutation_steps": args.mutation_steps,
        "policy": args.policy,
        "output": args.out,
    }
    return parse_config(path, **overrides)


def run(args) -> int:
    cfg = load(args)
    cmd = args.command
    if cmd == "enumerate":
        for code, p in pipeline.cmd_enumerate(cfg):
            print(f"{code}  {p:.6f}")
    elif cmd == "infer":
        codes = None if args.all else [c for s in args.structure for c in s.split(",")]
        for code, ev in pipeline.cmd_infer(cfg, codes, args.jobs).items():
            print(f"{code}  log evidence {ev:.4f}")
    elif cmd == "select":
        post = pipeline.cmd_select(cfg)
        for code, p in post.probabilities.items():
            print(f"{code}  {p:.6f}")
    elif cmd == "average":
        pipeline.cmd_average(cfg)
        print(f"wrote {cfg.output / 'sankey.json'}")
    elif cmd == "impact":
        s = pipeline.cmd_impact(cfg)
        print(f"total impact mean {s['total_ei_mean']:.4f}  sd {s['total_ei_sd']:.4f}")
    elif cmd == "decide":
        print(pipeline.cmd_decide(cfg).to_text(), end="")
    elif cmd == "run":
        report = pipeline.cmd_run(cfg, args.jobs)
        if report is not None:
            print(report.to_text(), end="")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ConfigError as exc:
        print("configuration error:", file=sys.stderr)
        for v in exc.violations:
            print(f"  - {v}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifactError, IncompleteEnsembleError) as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (NumericalError, NonDissipativeCycleError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except MFAError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
