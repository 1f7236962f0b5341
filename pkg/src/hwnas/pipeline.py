"""Pipeline commands: global search, local search, reports and Pareto plots.

Run directory layout::

    search run       config.json  manifest.json  trials.csv  timings.csv  pareto.json
    localsearch run  config.json  manifest.json  checkpoints.csv  checkpoints/  model.json  weights.bin
    report           report.txt  comparison.csv  utilization.csv
    plot             plot_<x>_vs_<y>.csv  plot_<x>_vs_<y>.svg

``trials.csv`` holds only seed-determined values so identical configs give
identical files; wall-clock times go to ``timings.csv``.
"""

from __future__ import annotations

import contextlib
import csv
import datetime as _dt
import hashlib
import json
import logging
import os
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

import hwnas
from hwnas import data as dt
from hwnas import local_search as ls
from hwnas import nsga2
from hwnas import space as sp
from hwnas import trainer as tr
from hwnas.config import ConfigError, RunConfig
from hwnas.estimator import (RuleBasedEstimator, avg_resource_pct, latency_ns,
                             load_linear_surrogate)
from hwnas.netir import NetworkDescription, count_bops, param_count

log = logging.getLogger(__name__)


class UserError(Exception):
    """Errors caused by user input (exit code 1)."""


class UnknownGenomeKeyError(UserError, KeyError):
    def __init__(self, key: str, available: list[str]):
        super().__init__(f"unknown genome key {key!r}; available: {', '.join(available) or '(none)'}")
        self.key = key
        self.available = available

    def __str__(self) -> str:
        return self.args[0]


class MissingArtifactError(UserError, FileNotFoundError):
    pass


class RunLockedError(UserError):
    pass


GENE_COLUMNS = ["num_layers", *[f"width{i}" for i in range(1, sp.MAX_LAYERS + 1)],
                "activation", "use_batchnorm", "learning_rate", "l1", "dropout"]


@dataclass
class PreparedData:
    train: dt.Dataset
    val: dt.Dataset
    test: dt.Dataset | None
    normalizer: dt.Normalizer


def prepare_data(cfg: RunConfig) -> PreparedData:
    """Load or synthesize, split, then z-score with statistics from the train split."""
    d = cfg.data
    if d.synthetic is not None:
        s = {"seed": d.seed, **d.synthetic}
        try:
            ds = dt.synth_blobs(s["n_per_class"], s["dim"], s["classes"], s["separation"], s["seed"])
        except KeyError as exc:
            raise ConfigError(f"data.synthetic.{exc.args[0]}", "missing") from None
    else:
        ds = dt.load_csv(d.path, d.label_column)
    train, val, test = dt.split(ds, d.split, d.seed)
    if train is None or val is None:
        raise ConfigError("data.split", "train and validation splits must be non-empty")
    norm = dt.fit_normalizer(train)
    return PreparedData(norm.apply(train), norm.apply(val),
                        norm.apply(test) if test is not None else None, norm)


def build_space(cfg: RunConfig, input_dim: int, num_classes: int) -> sp.SearchSpaceConfig:
    overrides = dict(cfg.space)
    for name, actual in (("input_dim", input_dim), ("num_classes", num_classes)):
        if name in overrides and overrides[name] != actual:
            raise ConfigError(f"space.{name}", f"is {overrides[name]} but the data has {actual}")
        overrides[name] = actual
    try:
        return sp.SearchSpaceConfig.from_dict(overrides)
    except (TypeError, ValueError) as exc:
        raise ConfigError("space", str(exc)) from exc


def build_estimator(cfg: RunConfig):
    est = cfg.estimator
    if est.surrogate:
        return load_linear_surrogate(est.surrogate, est.reuse_factor)
    return RuleBasedEstimator(est.estimator_config())


def network_metrics(net: NetworkDescription, accuracy: float, cfg: RunConfig,
                    estimator=None) -> dict[str, float]:
    """Every searchable metric for a (possibly compressed) network description."""
    estimator = estimator or build_estimator(cfg)
    device = cfg.estimator.device_profile()
    est = estimator.estimate(net, device)
    return {
        "accuracy": accuracy,
        "bops": float(count_bops(net)),
        "est_avg_resources": avg_resource_pct(est, device),
        "est_clock_cycles": est.latency_cycles,
        "est_latency_ns": latency_ns(est, device),
        "est_ii_cycles": est.ii_cycles,
        "est_lut": est.lut,
        "est_ff": est.ff,
        "est_dsp": est.dsp,
        "est_bram": est.bram,
        "param_count": float(param_count(net)),
    }


def trial_seed(search_seed: int, trial_index: int) -> int:
    return int(np.random.SeedSequence([search_seed, trial_index, 7]).generate_state(1)[0])


def make_evaluator(cfg: RunConfig, space: sp.SearchSpaceConfig, data: PreparedData):
    names = tuple(n for n, _ in cfg.search.objectives())
    senses = tuple(s for _, s in cfg.search.objectives())
    estimator = build_estimator(cfg)
    bits = cfg.estimator.precision_bits

    def evaluate_genome(genome: sp.ArchitectureGenome, trial_index: int) -> nsga2.ObjectiveVector:
        net = sp.decode(genome, space)
        tcfg = tr.TrainConfig.for_network(net, cfg.search.epochs_per_trial,
                                          batch_size=cfg.batch_size,
                                          seed=trial_seed(cfg.search.seed, trial_index))
        try:
            model = tr.train(net, data.train, data.val, tcfg)
        except tr.TrainingDivergedError as exc:
            raise nsga2.TrialFailed(str(exc)) from exc
        acc = tr.evaluate(model, data.val)
        metrics = network_metrics(net.with_precision(bits), acc, cfg, estimator)
        return nsga2.ObjectiveVector(tuple(metrics[n] for n in names), senses, names)

    return evaluate_genome


# -- run directory plumbing -------------------------------------------------

@contextlib.contextmanager
def run_lock(run_dir: Path):
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / "run.lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunLockedError(f"{run_dir} is locked by another command (remove {lock} if stale)") from None
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


def write_json_atomic(path: Path, obj) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False))
    os.replace(tmp, path)


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def write_manifest(run_dir: Path, cfg: RunConfig, command: str, started: str,
                   artifacts: dict, extra: dict | None = None) -> None:
    write_json_atomic(run_dir / "manifest.json", {
        "tool": "hwnas",
        "tool_version": hwnas.__version__,
        "command": command,
        "config_hash": cfg.config_hash(),
        "started": started,
        "finished": _now(),
        "seeds": {"master": cfg.master_seed, "data": cfg.data.seed, "search": cfg.search.seed,
                  "local": cfg.local.seed},
        "artifacts": artifacts,
        **(extra or {}),
    })


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return repr(v)
    return str(v)


def trial_row(t: nsga2.Trial) -> list[str]:
    return [str(t.trial_index), str(t.generation), t.key, *map(_fmt, t.genome.genes()),
            *map(_fmt, t.objectives.values), _fmt(t.failed)]


def read_trials(run_dir: Path) -> list[dict]:
    path = Path(run_dir) / "trials.csv"
    if not path.exists():
        raise MissingArtifactError(f"missing artifact: {path}")
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


def genome_from_row(row: dict) -> sp.ArchitectureGenome:
    return sp.ArchitectureGenome(
        num_layers=int(row["num_layers"]),
        widths=tuple(int(row[f"width{i}"]) for i in range(1, sp.MAX_LAYERS + 1)),
        activation=row["activation"],
        use_batchnorm=row["use_batchnorm"] == "true",
        learning_rate=float(row["learning_rate"]),
        l1=float(row["l1"]),
        dropout=float(row["dropout"]),
    )


def _finite(v: float):
    return None if not np.isfinite(v) else v


# -- commands ---------------------------------------------------------------

def cmd_search(cfg: RunConfig) -> Path:
    """Global search; writes trials.csv, timings.csv, pareto.json, config copy and manifest."""
    run_dir = Path(cfg.output_dir)
    started = _now()
    with run_lock(run_dir):
        (run_dir / "config.json").write_text(cfg.canonical_json())
        data = prepare_data(cfg)
        space = build_space(cfg, data.train.dim, data.train.num_classes)
        names = [n for n, _ in cfg.search.objectives()]
        evaluator = make_evaluator(cfg, space, data)
        with (run_dir / "trials.csv").open("w", newline="") as tf, \
                (run_dir / "timings.csv").open("w", newline="") as wf:
            tw, ww = csv.writer(tf), csv.writer(wf)
            tw.writerow(["trial_index", "generation", "genome_key", *GENE_COLUMNS, *names, "failed"])
            ww.writerow(["trial_index", "wall_time_s"])

            def on_trial(t: nsga2.Trial) -> None:
                tw.writerow(trial_row(t))
                ww.writerow([t.trial_index, f"{t.wall_time:.6f}"])
                tf.flush()
                wf.flush()
                log.info("trial %d %s %s", t.trial_index, t.key, t.objectives.as_dict())

            result = nsga2.evolve(space, evaluator, cfg.search, on_trial=on_trial)
        write_json_atomic(run_dir / "pareto.json", {
            "version": 1,
            "objectives": [{"name": n, "sense": s} for n, s in cfg.search.objectives()],
            "members": [{
                "genome_key": ind.key,
                "trial_index": ind.trial_index,
                "genome": ind.genome.to_dict(),
                "objectives": ind.objectives.as_dict(),
                "crowding": _finite(ind.crowding),
            } for ind in result.archive],
        })
        write_manifest(run_dir, cfg, "search", started,
                       {"config": "config.json", "trials": "trials.csv", "timings": "timings.csv",
                        "pareto": "pareto.json"},
                       {"trials_evaluated": len(result.trials), "generations": result.generations,
                        "space": space.to_dict(),
                        "search_params": {"crossover_prob": cfg.search.crossover_prob,
                                          "mutation_rate": cfg.search.mutation_rate,
                                          "population_size": cfg.search.population_size}})
    return run_dir


def load_pareto(run_dir: Path) -> dict:
    path = Path(run_dir) / "pareto.json"
    if not path.exists():
        raise MissingArtifactError(f"missing artifact: {path}")
    return json.loads(path.read_text())


def pareto_individuals(doc: dict) -> list[nsga2.Individual]:
    names = tuple(o["name"] for o in doc["objectives"])
    senses = tuple(o["sense"] for o in doc["objectives"])
    return [nsga2.Individual(sp.ArchitectureGenome.from_dict(m["genome"]),
                             nsga2.ObjectiveVector(tuple(m["objectives"][n] for n in names), senses, names),
                             trial_index=m["trial_index"]) for m in doc["members"]]


def resolve_genome(from_run: Path, key: str | None, min_accuracy: float) -> sp.ArchitectureGenome:
    """Look up `key` in a search run; without a key, take the most accurate
    archive member whose accuracy exceeds `min_accuracy`."""
    doc = load_pareto(from_run)
    members = pareto_individuals(doc)
    if key is None:
        chosen = nsga2.pareto_filter(members, min_accuracy)
        if not chosen:
            raise UserError(f"no archive member has accuracy > {min_accuracy}; pass --genome")
        return max(chosen, key=lambda ind: ind.objectives.get("accuracy")).genome
    for ind in members:
        if ind.key == key:
            return ind.genome
    trials_path = Path(from_run) / "trials.csv"
    if trials_path.exists():
        for row in read_trials(from_run):
            if row["genome_key"] == key:
                return genome_from_row(row)
    raise UnknownGenomeKeyError(key, [ind.key for ind in members])


def cmd_localsearch(cfg: RunConfig, from_run: str | Path | None = None, genome_key: str | None = None,
                    model_path: str | Path | None = None, target_sparsity: float = 0.5,
                    min_accuracy: float = 0.0, out_dir: str | Path | None = None) -> Path:
    """Compress one architecture and export the selected checkpoint."""
    data = prepare_data(cfg)
    space = build_space(cfg, data.train.dim, data.train.num_classes)
    if model_path is not None:
        mp = Path(model_path)
        if not mp.exists():
            raise MissingArtifactError(f"missing artifact: {mp}")
        manifest = json.loads(mp.read_text())
        net = ls.uncompressed(NetworkDescription.from_dict(manifest["network"]))
        source = {"model": str(mp.resolve())}
        tag = hashlib.sha1(str(mp.resolve()).encode()).hexdigest()[:10]
    else:
        if from_run is None:
            raise UserError("localsearch needs --from <run> or --model <model.json>")
        genome = resolve_genome(Path(from_run), genome_key, cfg.selection_min_accuracy)
        net = sp.decode(genome, space)
        key = sp.genome_key(genome)
        source = {"from_run": str(Path(from_run).resolve()), "genome_key": key,
                  "genome": genome.to_dict()}
        tag = hashlib.sha1(key.encode()).hexdigest()[:10]
    if net.input_dim != data.train.dim or net.num_classes != data.train.num_classes:
        raise UserError(f"architecture expects {net.input_dim} features / {net.num_classes} classes, "
                        f"data has {data.train.dim} / {data.train.num_classes}")
    run_dir = Path(out_dir) if out_dir is not None else Path(cfg.output_dir) / f"localsearch-{tag}"
    started = _now()
    with run_lock(run_dir):
        (run_dir / "config.json").write_text(cfg.canonical_json())
        local_cfg = replace(cfg.local, batch_size=cfg.batch_size)
        records = ls.local_search(net, data.train, data.val, local_cfg, build_estimator(cfg),
                                  cfg.estimator.device_profile(), out_dir=run_dir)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", ls.AccuracyFallbackWarning)
            chosen = ls.select_checkpoint(records, target_sparsity, min_accuracy)
        fallback = any(issubclass(w.category, ls.AccuracyFallbackWarning) for w in caught)
        if fallback:
            log.warning("no checkpoint reached accuracy %s; exported the most accurate", min_accuracy)
        provenance = {"config_hash": cfg.config_hash(), "seeds": {"local": cfg.local.seed,
                      "data": cfg.data.seed}, "source": source}
        ls.export_model(chosen, net, run_dir, provenance)
        test_acc = None
        if data.test is not None:
            model, _ = ls.load_model(run_dir / "model.json")
            test_acc = tr.evaluate(model, data.test)
        write_manifest(run_dir, cfg, "localsearch", started,
                       {"config": "config.json", "checkpoints": "checkpoints.csv",
                        "model": "model.json", "weights": "weights.bin"},
                       {"source": source, "network": net.to_dict(),
                        "selection": {"iteration": chosen.iteration, "target_sparsity": target_sparsity,
                                      "min_accuracy": min_accuracy, "accuracy_fallback": fallback,
                                      "test_accuracy": test_acc}})
    return run_dir
