"""Report tables and Pareto scatter output (CSV + standalone SVG)."""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

import numpy as np

from hwnas import local_search as ls
from hwnas import nsga2
from hwnas import space as sp
from hwnas.config import RunConfig, parse_config
from hwnas.estimator import ResourceEstimate, avg_resource_pct
from hwnas.pipeline import (MissingArtifactError, UserError, build_estimator, load_pareto,
                            network_metrics, read_trials)

COMPARISON_COLUMNS = ["model", "accuracy_pct", "bops", "est_avg_resources", "est_clock_cycles"]
UTILIZATION_COLUMNS = ["model", "latency_ns_cc", "ii_ns_cc", "dsp", "lut", "ff", "bram"]


class UnknownMetricError(UserError, KeyError):
    def __str__(self) -> str:
        return self.args[0]


def _load_run_config(run_dir: Path) -> RunConfig:
    path = run_dir / "config.json"
    if not path.exists():
        raise MissingArtifactError(f"missing artifact: {path}")
    return parse_config(json.loads(path.read_text()), run_dir)


def _manifest(run_dir: Path) -> dict:
    path = run_dir / "manifest.json"
    if not path.exists():
        raise MissingArtifactError(f"missing artifact: {path}")
    return json.loads(path.read_text())


def usage_cell(count: float, capacity: int) -> str:
    """``"155080 (9.0%)"``: rounded count and one-decimal utilization."""
    return f"{round(count)} ({100.0 * count / capacity:.1f}%)"


def _num(v: float) -> str:
    return f"{v:g}" if float(v).is_integer() else f"{v:.2f}"


def utilization_row(name: str, est: ResourceEstimate, device) -> list[str]:
    period = device.clock_period_ns
    return [
        name,
        f"{_num(est.latency_cycles * period)} ({_num(est.latency_cycles)})",
        f"{_num(est.ii_cycles * period)} ({_num(est.ii_cycles)})",
        *[usage_cell(getattr(est, r), device.capacity(r)) for r in ("dsp", "lut", "ff", "bram")],
    ]


def comparison_row(name: str, accuracy: float, bops: float, avg_res: float, cycles: float) -> list[str]:
    return [name, f"{100.0 * accuracy:.2f}", f"{round(bops):,}", f"{avg_res:.2f}", f"{cycles:.2f}"]


def _text_table(header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in [header, *rows]) for i in range(len(header))]
    line = lambda r: "  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()  # noqa: E731
    return "\n".join([line(header), line(["-" * w for w in widths]), *map(line, rows)])


def _csv_text(header: list[str], rows: list[list[str]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _search_rows(run_dir: Path, cfg: RunConfig, manifest: dict):
    doc = load_pareto(run_dir)
    if "space" not in manifest:
        raise MissingArtifactError(f"{run_dir / 'manifest.json'} lacks the search space")
    space = sp.SearchSpaceConfig.from_dict(manifest["space"])
    estimator = build_estimator(cfg)
    device = cfg.estimator.device_profile()
    t2, t3 = [], []
    for m in doc["members"]:
        genome = sp.ArchitectureGenome.from_dict(m["genome"])
        net = sp.decode(genome, space).with_precision(cfg.estimator.precision_bits)
        acc = m["objectives"].get("accuracy", float("nan"))
        metrics = network_metrics(net, acc, cfg, estimator)
        name = f"trial{m['trial_index']}"
        if acc > cfg.selection_min_accuracy:
            name += "*"
        t2.append(comparison_row(name, acc, metrics["bops"], metrics["est_avg_resources"],
                             metrics["est_clock_cycles"]))
        t3.append(utilization_row(name, estimator.estimate(net, device), device))
    return t2, t3


def _local_rows(run_dir: Path, cfg: RunConfig, manifest: dict):
    path = run_dir / "checkpoints.csv"
    if not path.exists():
        raise MissingArtifactError(f"missing artifact: {path}")
    records = ls.read_checkpoints_csv(path)
    device = cfg.estimator.device_profile()
    chosen = manifest.get("selection", {}).get("iteration")
    t2, t3 = [], []
    for r in records:
        name = f"ckpt{r.iteration}" + ("*" if r.iteration == chosen else "")
        t2.append(comparison_row(name, r.val_accuracy, r.bops, avg_resource_pct(r.estimate, device),
                             r.estimate.latency_cycles))
        t3.append(utilization_row(name, r.estimate, device))
    return t2, t3


def cmd_report(run_dir: str | Path) -> str:
    """Write report.txt, comparison.csv and utilization.csv; return the text report.

    Search runs list every Pareto archive member (``*`` marks members above
    the selection accuracy threshold); local-search runs list every
    checkpoint (``*`` marks the exported one).
    """
    run_dir = Path(run_dir)
    manifest = _manifest(run_dir)
    cfg = _load_run_config(run_dir)
    if manifest["command"] == "search":
        t2, t3 = _search_rows(run_dir, cfg, manifest)
        title = "global search: Pareto archive"
    elif manifest["command"] == "localsearch":
        t2, t3 = _local_rows(run_dir, cfg, manifest)
        title = "local search: checkpoints"
    else:
        raise UserError(f"cannot report on command {manifest['command']!r}")
    device = cfg.estimator.device_profile()
    h2 = ["Model", "Accuracy [%]", "BOPs", "Est. average resources", "Est. clock cycles"]
    h3 = ["Model", "Lat. [ns] (cc)", "II [ns] (cc)", "DSP", "LUT", "FF", "BRAM"]
    text = "\n".join([
        f"# {title} ({run_dir.name}); device {device.name}, clock {device.clock_period_ns:g} ns",
        "",
        "## model comparison",
        _text_table(h2, t2),
        "",
        "## resource utilization and latency",
        _text_table(h3, t3),
        "",
    ])
    (run_dir / "report.txt").write_text(text)
    (run_dir / "comparison.csv").write_text(_csv_text(COMPARISON_COLUMNS, t2))
    (run_dir / "utilization.csv").write_text(_csv_text(UTILIZATION_COLUMNS, t3))
    return text


# -- scatter plots ----------------------------------------------------------

def pareto_flags_2d(points: list[tuple[float, float]], senses: tuple[str, str],
                    valid: list[bool] | None = None) -> list[bool]:
    """Non-dominated flags of 2-D points under the given senses."""
    valid = valid or [True] * len(points)
    canon = [tuple(-v if s == nsga2.MAXIMIZE else v for v, s in zip(p, senses)) for p in points]
    F = [c for c, ok in zip(canon, valid) if ok]
    idx = [i for i, ok in enumerate(valid) if ok]
    flags = [False] * len(points)
    if F:
        fronts = nsga2.sort_matrix(np.array(F, dtype=float))
        for j in fronts[0]:
            flags[idx[j]] = True
    return flags


def cmd_plot(run_dir: str | Path, x_metric: str, y_metric: str, log_x: bool | None = None) -> tuple[Path, Path]:
    """Scatter of two trials.csv metrics: one point per unique genome, 2-D Pareto flags.

    Pareto flags are computed in the plotted projection only. Failed trials
    are kept in the CSV (never flagged) and left out of the SVG.
    """
    run_dir = Path(run_dir)
    rows = read_trials(run_dir)
    available = [c for c in (rows[0].keys() if rows else []) if c in nsga2.METRIC_SENSES]
    for m in (x_metric, y_metric):
        if m not in available:
            raise UnknownMetricError(f"unknown metric {m!r}; available: {', '.join(available)}")
    seen, pts, keys, ok = set(), [], [], []
    for r in rows:
        if r["genome_key"] in seen:
            continue
        seen.add(r["genome_key"])
        keys.append(r["genome_key"])
        pts.append((float(r[x_metric]), float(r[y_metric])))
        ok.append(r.get("failed", "false") != "true")
    flags = pareto_flags_2d(pts, (nsga2.METRIC_SENSES[x_metric], nsga2.METRIC_SENSES[y_metric]), ok)
    stem = f"plot_{x_metric}_vs_{y_metric}"
    csv_path = run_dir / f"{stem}.csv"
    with csv_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["genome_key", x_metric, y_metric, "is_pareto", "failed"])
        for k, (x, y), f, good in zip(keys, pts, flags, ok):
            w.writerow([k, repr(x), repr(y), str(f).lower(), str(not good).lower()])
    if log_x is None:
        log_x = x_metric == "bops"
    svg = render_svg([p for p, good in zip(pts, ok) if good], [f for f, good in zip(flags, ok) if good],
                     x_metric, y_metric, log_x)
    svg_path = run_dir / f"{stem}.svg"
    svg_path.write_text(svg)
    return csv_path, svg_path


LABELS = {
    "accuracy": "Accuracy",
    "bops": "BOPs",
    "est_avg_resources": "Est. average resources [%]",
    "est_clock_cycles": "Est. clock cycles",
}


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi == lo:
        return [lo]
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def render_svg(points: list[tuple[float, float]], pareto: list[bool], x_label: str, y_label: str,
               log_x: bool = False, width: int = 800, height: int = 600) -> str:
    """Self-contained SVG scatter; Pareto points drawn larger in red."""
    left, right, top, bottom = 90, 30, 30, 70
    pw, ph = width - left - right, height - top - bottom
    tx = (lambda v: math.log10(v)) if log_x else (lambda v: v)
    if log_x:
        points = [(x, y) for x, y in points if x > 0]
    xs = [tx(x) for x, _ in points] or [0.0, 1.0]
    ys = [y for _, y in points] or [0.0, 1.0]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    padx = (x1 - x0) * 0.05 or 0.5
    pady = (y1 - y0) * 0.05 or 0.5
    x0, x1, y0, y1 = x0 - padx, x1 + padx, y0 - pady, y1 + pady
    sx = lambda v: left + (v - x0) / (x1 - x0) * pw  # noqa: E731
    sy = lambda v: top + ph - (v - y0) / (y1 - y0) * ph  # noqa: E731
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for t in _ticks(x0 + padx, x1 - padx):
        label = f"{10 ** t:.3g}" if log_x else f"{t:.4g}"
        out.append(f'<line x1="{sx(t):.2f}" y1="{top + ph}" x2="{sx(t):.2f}" y2="{top + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{sx(t):.2f}" y="{top + ph + 20}" text-anchor="middle">{label}</text>')
    for t in _ticks(y0 + pady, y1 - pady):
        out.append(f'<line x1="{left - 5}" y1="{sy(t):.2f}" x2="{left}" y2="{sy(t):.2f}" stroke="black"/>')
        out.append(f'<text x="{left - 8}" y="{sy(t) + 4:.2f}" text-anchor="end">{t:.4g}</text>')
    xl = LABELS.get(x_label, x_label) + (" (log)" if log_x else "")
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 20}" text-anchor="middle">{xl}</text>')
    out.append(f'<text x="20" y="{top + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 20 {top + ph / 2:.1f})">{LABELS.get(y_label, y_label)}</text>')
    for (x, y), p in sorted(zip(points, pareto), key=lambda t: t[1]):
        if p:
            out.append(f'<circle cx="{sx(tx(x)):.2f}" cy="{sy(y):.2f}" r="5" fill="#d62728" '
                       f'stroke="black" stroke-width="0.8"><title>pareto</title></circle>')
        else:
            out.append(f'<circle cx="{sx(tx(x)):.2f}" cy="{sy(y):.2f}" r="3" fill="#7f7f7f" '
                       f'fill-opacity="0.6"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
