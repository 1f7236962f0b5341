"""Command line: ``hwnas {search,localsearch,report,plot}``.

Exit codes: 0 ok, 1 user error (bad config, unknown key/metric, missing
artifact), 2 internal error. Log level comes from ``HWNAS_LOG_LEVEL``.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from hwnas import data as dt
from hwnas import nsga2, pipeline, report
from hwnas.config import ConfigError, load_config
from hwnas.estimator import SurrogateSchemaError
from hwnas.space import SpaceError

log = logging.getLogger("hwnas")

USER_ERRORS = (ConfigError, pipeline.UserError, dt.DataError, SpaceError, SurrogateSchemaError)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hwnas", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("search", help="global multi-objective architecture search")
    s.add_argument("--config", required=True)

    l = sub.add_parser("localsearch", help="prune + QAT a selected architecture")
    l.add_argument("--config", required=True)
    l.add_argument("--from", dest="from_run", help="search run directory holding pareto.json")
    l.add_argument("--genome", help="genome key; default: most accurate member above the selection threshold")
    l.add_argument("--model", help="model.json to compress instead of a genome")
    l.add_argument("--target-sparsity", type=float, default=0.5)
    l.add_argument("--min-accuracy", type=float, default=0.0)
    l.add_argument("--out", help="output run directory")

    r = sub.add_parser("report", help="model comparison and utilization tables")
    r.add_argument("run")

    pl = sub.add_parser("plot", help="2-D Pareto scatter (CSV + SVG)")
    pl.add_argument("run")
    pl.add_argument("--x", required=True)
    pl.add_argument("--y", required=True)
    pl.add_argument("--log-x", action="store_true", default=None)
    return p


def run(args: argparse.Namespace) -> None:
    if args.command == "search":
        out = pipeline.cmd_search(load_config(args.config))
        print(out)
    elif args.command == "localsearch":
        out = pipeline.cmd_localsearch(load_config(args.config), args.from_run, args.genome, args.model,
                                       args.target_sparsity, args.min_accuracy, args.out)
        print(out)
    elif args.command == "report":
        print(report.cmd_report(args.run), end="")
    elif args.command == "plot":
        csv_path, svg_path = report.cmd_plot(args.run, args.x, args.y, args.log_x)
        print(csv_path)
        print(svg_path)


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("HWNAS_LOG_LEVEL", "WARNING").upper(),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad usage; that is a user error here
        return 0 if exc.code in (0, None) else 1
    try:
        run(args)
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except nsga2.SearchAborted as exc:
        print(f"search aborted after {len(exc.trials)} trials: {exc}", file=sys.stderr)
        return 2
    except Exception:
        log.exception("internal error")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
