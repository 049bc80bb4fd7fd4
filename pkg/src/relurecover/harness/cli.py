"""Command-line entry point: ``relurecover <subcommand> [--config PATH] [--seed U64] [--out DIR] [--threads N]``.

Exit codes: 0 on success, 1 when a stage fails, 2 for configuration errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from ..errors import ConfigError, RecoveryError, StageError
from .config import DEFAULTS, load_config, validate
from .pipeline import Run, run_pipeline, run_verify_lemmas

log = logging.getLogger("relurecover")

EXIT_OK, EXIT_STAGE, EXIT_CONFIG = 0, 1, 2


def _u64(text):
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _positive(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return value


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="experiment configuration (JSON)")
    common.add_argument("--seed", type=_u64, metavar="U64", help="root seed (overrides the config)")
    common.add_argument("--out", metavar="DIR", help="run directory (overrides output_dir)")
    common.add_argument("--threads", type=_positive, metavar="N", help="worker threads")
    common.add_argument("--no-figures", action="store_true", help="skip the PNG figures")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="relurecover",
                                     description="Recover depth-2 ReLU networks from Gaussian samples.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    helps = {
        "generate": "draw the ground-truth network (network.json)",
        "sample": "sample labelled data from network.json (dataset.hdata)",
        "estimate": "estimate Hermite coefficients T_k (T_k.htnsr, estimate.json)",
        "recover": "recover units from the coefficients (recovered.json)",
        "regress": "fit and consolidate the final network (final_network.json, regress.json)",
        "evaluate": "match recovered units to network.json (match.json, summary.csv)",
        "pipeline": "run every stage (report.json)",
        "verify-lemmas": "check the Hermite and Khatri-Rao inequalities (lemmas.json)",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text, description=text)
    return parser


def resolve_config(args):
    cfg = load_config(args.config) if args.config else validate({"version": DEFAULTS["version"]})
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.threads is not None:
        cfg["threads"] = args.threads
    if args.out is not None:
        cfg["output_dir"] = args.out
    if cfg["output_dir"] is None:
        raise ConfigError("no output directory: pass --out or set output_dir")
    return cfg


def _has(run, name):
    return run.path(name).exists()


def run_stage(command, cfg, figures):
    if command == "pipeline":
        report = run_pipeline(cfg, figures=figures)
        return {"status": report["status"], "out": cfg["output_dir"]}
    if command == "verify-lemmas":
        report = run_verify_lemmas(cfg["output_dir"], figures=cfg["artifacts"]["figures"] if figures is None else figures)
        return {"passed": report["passed"],
                "checks": {c["name"]: c["passed"] for c in report["checks"]}}

    run = Run(cfg, figures=figures)

    def need(name):
        if not _has(run, name):
            raise StageError(command, FileNotFoundError(f"{run.path(name)} is missing; run the earlier stage"))

    def stage(fn, *a):
        return run.timed(command, fn, *a)

    if command == "generate":
        net = stage(run.generate)
        return {"d": net.d, "m": net.m}
    if command == "sample":
        need("network.json")
        data = stage(run.sample, run.network(), True)
        return {"N": data.N, "d": data.d}
    if command == "estimate":
        net = run.network() if _has(run, "network.json") else None
        if cfg["coefficients"] == "exact":
            need("network.json")
            stage(run.estimate, net, None)
        else:
            need("dataset.hdata")
            est, _ = run.split(run.dataset())
            stage(run.estimate, net, est)
        return {"orders": list(range(run.kmax + 1))}
    if command == "recover":
        need("estimate.json")
        coeffs, noise = run.coefficients()
        units, _ = stage(run.recover, coeffs, noise)
        return {"units": len(units)}
    if command == "regress":
        need("dataset.hdata")
        need("recovered.json")
        net = run.network() if _has(run, "network.json") else None
        _, second = run.split(run.dataset())
        _, metrics = stage(run.regress, second, run.recovered_units(), net)
        return {"units": metrics["units"], "mse_estimate": metrics["mse_estimate"]}
    if command == "evaluate":
        need("network.json")
        need("recovered.json")
        match = stage(run.evaluate, run.network(), run.recovered_units())
        return {"total_cost": match["total_cost"], "max_cost": match["max_cost"]}
    raise ConfigError(f"unknown command {command!r}")


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        summary = run_stage(args.command, cfg, False if args.no_figures else None)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error in stage {exc.stage}: {exc.cause}", file=sys.stderr)
        return EXIT_STAGE
    except RecoveryError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
