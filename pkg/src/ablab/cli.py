"""Command line: ``ablab run | sweep | report``."""

from __future__ import annotations

import argparse
import sys

from .config import RunConfig
from .errors import AbLabError, ConfigError, InvariantViolation, ProtocolError

EXIT_CONFIG = 2
EXIT_PROTOCOL = 3
EXIT_OTHER = 1


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ablab", description="AB training laboratory")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train once and write reports")
    run.add_argument("--config", required=True)
    run.add_argument("--mode", choices=["TradDDP", "AbGroups", "AbNoGroups"])
    run.add_argument("--world-size", type=int)
    run.add_argument("--num-groups", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--out")

    sweep = sub.add_parser("sweep", help="scaling sweep over node counts")
    sweep.add_argument("--config", required=True)
    sweep.add_argument("--nodes", required=True, help="comma separated, e.g. 1,2,4,8")
    sweep.add_argument("--scaling", choices=["local", "global"], required=True)
    sweep.add_argument("--out")

    rep = sub.add_parser("report", help="print the metrics table of a report directory")
    rep.add_argument("--in", dest="indir", required=True)
    return p


def _out_dir(cfg: RunConfig, arg: str | None) -> str:
    out = arg or cfg.output_dir
    if out is None:
        raise ConfigError("no output directory: pass --out or set output_dir")
    return out


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    from . import report

    try:
        if args.command == "report":
            print(report.format_table(report.read_metrics(args.indir)))
            return 0
        cfg = RunConfig.load(args.config)
        if args.command == "run":
            cfg = cfg.override(mode=args.mode, world_size=args.world_size,
                               num_groups=args.num_groups, seed=args.seed)
            out = _out_dir(cfg, args.out)
            from .training import run_training

            rep = run_training(cfg)
            results = [(cfg, rep, report.metrics_from_run(rep))]
        else:
            try:
                nodes = [int(n) for n in args.nodes.split(",") if n.strip()]
            except ValueError as exc:
                raise ConfigError(f"--nodes: {exc}") from exc
            out = _out_dir(cfg, args.out)
            results = report.scaling_sweep(cfg, nodes, args.scaling)
        report.emit_reports(results, out)
        print(report.format_table(report.read_metrics(out)))
        return 0
    except ConfigError as exc:
        print(f"ablab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ProtocolError, InvariantViolation) as exc:
        print(f"ablab: protocol error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except (AbLabError, OSError) as exc:
        print(f"ablab: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
