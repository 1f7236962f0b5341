#!/usr/bin/env python3
"""End-to-end desk-scale run: search -> localsearch -> report -> plots.

    python3 scripts/desk_run.py [--config configs/desk_blobs.json]

Every stage goes through the same entry points as the ``hwnas`` CLI, so the
run directories it leaves behind can be re-reported or re-plotted later.
"""

from __future__ import annotations

import argparse
import logging
import time
from pathlib import Path

from hwnas import pipeline, report
from hwnas.config import load_config

ROOT = Path(__file__).resolve().parents[1]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(ROOT / "configs" / "desk_blobs.json"))
    ap.add_argument("--target-sparsity", type=float, default=0.5)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = load_config(args.config)
    t0 = time.perf_counter()
    run_dir = pipeline.cmd_search(cfg)
    print(f"search: {run_dir} ({time.perf_counter() - t0:.1f}s)")
    print(report.cmd_report(run_dir))
    objectives = [n for n, _ in cfg.search.objectives()]
    for other in objectives[1:]:
        for path in report.cmd_plot(run_dir, other, "accuracy"):
            print(f"plot: {path}")
    if len(objectives) == 3:
        for path in report.cmd_plot(run_dir, objectives[1], objectives[2]):
            print(f"plot: {path}")

    t0 = time.perf_counter()
    ls_dir = pipeline.cmd_localsearch(cfg, from_run=run_dir, target_sparsity=args.target_sparsity)
    print(f"localsearch: {ls_dir} ({time.perf_counter() - t0:.1f}s)")
    print(report.cmd_report(ls_dir))


if __name__ == "__main__":
    main()
