"""NSGA-II: dominance, non-dominated sorting, crowding distance and the search loop."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from hwnas import space as sp
from hwnas.space import ArchitectureGenome, SearchSpaceConfig

log = logging.getLogger(__name__)

MINIMIZE = "minimize"
MAXIMIZE = "maximize"

OBJECTIVE_SETS = {
    "snacpack": (("accuracy", MAXIMIZE), ("est_avg_resources", MINIMIZE),
                 ("est_clock_cycles", MINIMIZE)),
    "nac": (("accuracy", MAXIMIZE), ("bops", MINIMIZE)),
}


class DimensionMismatchError(ValueError):
    pass


class ObjectiveMissingError(KeyError):
    pass


class TrialFailed(Exception):
    """Raised by an evaluator for a failed (e.g. diverged) trial."""


class SearchAborted(RuntimeError):
    def __init__(self, message: str, trials: list["Trial"]):
        super().__init__(message)
        self.trials = trials


@dataclass(frozen=True)
class ObjectiveVector:
    values: tuple[float, ...]
    senses: tuple[str, ...]
    names: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        object.__setattr__(self, "senses", tuple(self.senses))
        if len(self.values) != len(self.senses):
            raise DimensionMismatchError("values and senses differ in length")
        if any(s not in (MINIMIZE, MAXIMIZE) for s in self.senses):
            raise ValueError(f"senses must be {MINIMIZE!r} or {MAXIMIZE!r}")
        if not all(math.isfinite(v) for v in self.values):
            raise ValueError("objective values must be finite")

    def canonical(self) -> tuple[float, ...]:
        """All-minimize form: maximize entries are negated."""
        return tuple(-v if s == MAXIMIZE else v for v, s in zip(self.values, self.senses))

    def get(self, name: str) -> float:
        if self.names is None or name not in self.names:
            raise ObjectiveMissingError(name)
        return self.values[self.names.index(name)]

    def as_dict(self) -> dict[str, float]:
        names = self.names or tuple(f"obj{i}" for i in range(len(self.values)))
        return dict(zip(names, self.values))


def dominates(a: ObjectiveVector, b: ObjectiveVector) -> bool:
    if len(a.values) != len(b.values) or a.senses != b.senses:
        raise DimensionMismatchError("objective vectors are not comparable")
    ca, cb = a.canonical(), b.canonical()
    return all(x <= y for x, y in zip(ca, cb)) and any(x < y for x, y in zip(ca, cb))


@dataclass
class Individual:
    genome: ArchitectureGenome
    objectives: ObjectiveVector
    rank: int = 0
    crowding: float = 0.0
    trial_index: int = -1

    @property
    def key(self) -> str:
        return sp.genome_key(self.genome)


def _dominance_matrix(F: np.ndarray) -> np.ndarray:
    """D[i, j] is True when row i dominates row j (minimization)."""
    le = np.all(F[:, None, :] <= F[None, :, :], axis=-1)
    lt = np.any(F[:, None, :] < F[None, :, :], axis=-1)
    return le & lt


def sort_matrix(F: np.ndarray) -> list[list[int]]:
    """Non-dominated fronts of a minimization objective matrix."""
    n = len(F)
    if n == 0:
        return []
    D = _dominance_matrix(np.asarray(F, dtype=float))
    counts = D.sum(axis=0)
    fronts = []
    current = np.flatnonzero(counts == 0)
    while current.size:
        fronts.append(current.tolist())
        counts = counts - D[current].sum(axis=0)
        counts[current] = -1
        current = np.flatnonzero(counts == 0)
    return fronts


def non_dominated_sort(pop: Sequence[Individual]) -> list[list[int]]:
    """Partition `pop` into fronts of indices and set each individual's rank."""
    if not pop:
        raise ValueError("population is empty")
    F = np.array([ind.objectives.canonical() for ind in pop], dtype=float)
    fronts = sort_matrix(F)
    for r, front in enumerate(fronts):
        for i in front:
            pop[i].rank = r
    return fronts


def crowding_distance(front: Sequence[Sequence[float]]) -> list[float]:
    """Crowding distance of each point of a front (rows = points, all-minimize)."""
    F = np.asarray(front, dtype=float)
    if F.ndim == 1:
        F = F[:, None]
    n = len(F)
    if n == 0:
        raise ValueError("front is empty")
    dist = np.zeros(n)
    if n <= 2:
        return [math.inf] * n
    for k in range(F.shape[1]):
        order = np.argsort(F[:, k], kind="stable")
        col = F[order, k]
        span = col[-1] - col[0]
        dist[order[0]] = dist[order[-1]] = math.inf
        if span == 0:
            continue
        gaps = (col[2:] - col[:-2]) / span
        interior = order[1:-1]
        dist[interior] = dist[interior] + gaps
    return dist.tolist()


def assign_crowding(pop: Sequence[Individual], fronts: list[list[int]]) -> None:
    for front in fronts:
        d = crowding_distance([pop[i].objectives.canonical() for i in front])
        for i, v in zip(front, d):
            pop[i].crowding = v


def _better(a: Individual, b: Individual) -> bool | None:
    if a.rank != b.rank:
        return a.rank < b.rank
    if a.crowding != b.crowding:
        return a.crowding > b.crowding
    return None


def tournament(pop: Sequence[Individual], rng: np.random.Generator) -> Individual:
    """Binary tournament on (rank asc, crowding desc); ties broken by coin flip."""
    i, j = rng.integers(len(pop), size=2)
    a, b = pop[i], pop[j]
    verdict = _better(a, b)
    if verdict is None:
        return a if rng.random() < 0.5 else b
    return a if verdict else b


def environmental_selection(pop: list[Individual], size: int) -> list[Individual]:
    fronts = non_dominated_sort(pop)
    assign_crowding(pop, fronts)
    chosen: list[Individual] = []
    for front in fronts:
        members = [pop[i] for i in front]
        if len(chosen) + len(members) <= size:
            chosen += members
        else:
            members.sort(key=lambda ind: -ind.crowding)
            chosen += members[: size - len(chosen)]
            break
    return chosen


@dataclass(frozen=True)
class SearchConfig:
    population_size: int = 20
    total_trials: int = 500
    epochs_per_trial: int = 5
    seed: int = 0
    objective_set: str | tuple[str, ...] = "snacpack"
    crossover_prob: float = 0.9
    mutation_rate: float = 1.0 / sp.NUM_GENES
    max_stale_generations: int = 200
    workers: int = 1

    def __post_init__(self):
        if self.population_size < 2 or self.population_size % 2:
            raise ValueError("population_size must be even and >= 2")
        if self.total_trials < self.population_size:
            raise ValueError("total_trials must be >= population_size")
        if isinstance(self.objective_set, list):
            object.__setattr__(self, "objective_set", tuple(self.objective_set))
        objective_spec(self.objective_set)

    def objectives(self) -> tuple[tuple[str, str], ...]:
        return objective_spec(self.objective_set)


METRIC_SENSES = {
    "accuracy": MAXIMIZE,
    "bops": MINIMIZE,
    "est_avg_resources": MINIMIZE,
    "est_clock_cycles": MINIMIZE,
    "est_latency_ns": MINIMIZE,
    "est_ii_cycles": MINIMIZE,
    "est_lut": MINIMIZE,
    "est_ff": MINIMIZE,
    "est_dsp": MINIMIZE,
    "est_bram": MINIMIZE,
    "param_count": MINIMIZE,
}


def objective_spec(objective_set) -> tuple[tuple[str, str], ...]:
    """Resolve a named objective set or a custom list of metric names."""
    if isinstance(objective_set, str):
        if objective_set not in OBJECTIVE_SETS:
            raise ValueError(f"unknown objective set {objective_set!r}; known {sorted(OBJECTIVE_SETS)}")
        return OBJECTIVE_SETS[objective_set]
    names = tuple(objective_set)
    if len(names) < 1 or len(set(names)) != len(names):
        raise ValueError("custom objective list must be non-empty and unique")
    unknown = [n for n in names if n not in METRIC_SENSES]
    if unknown:
        raise ValueError(f"unknown metrics {unknown}; known {sorted(METRIC_SENSES)}")
    return tuple((n, METRIC_SENSES[n]) for n in names)


@dataclass
class Trial:
    trial_index: int
    genome: ArchitectureGenome
    key: str
    objectives: ObjectiveVector
    wall_time: float
    failed: bool = False
    generation: int = 0


@dataclass
class SearchResult:
    archive: list[Individual]
    trials: list[Trial]
    generations: int
    config: SearchConfig
    population: list[Individual] = field(default_factory=list)


Evaluator = Callable[[ArchitectureGenome, int], ObjectiveVector]


class _WorstCase:
    """Worst-seen tracker used to score failed trials."""

    def __init__(self, senses: tuple[str, ...]):
        self.senses = senses
        self.worst = [None] * len(senses)

    def observe(self, ov: ObjectiveVector) -> None:
        for k, (v, s) in enumerate(zip(ov.values, self.senses)):
            w = self.worst[k]
            if w is None or (v > w if s == MINIMIZE else v < w):
                self.worst[k] = v

    def vector(self, names) -> ObjectiveVector:
        vals = []
        for w, s in zip(self.worst, self.senses):
            if s == MAXIMIZE:
                vals.append(0.0 if w is None or w >= 0 else 10.0 * w)
            else:
                vals.append(1e9 if w is None or w <= 0 else 10.0 * w)
        return ObjectiveVector(tuple(vals), self.senses, names)


def evolve(space: SearchSpaceConfig, evaluator: Evaluator, cfg: SearchConfig,
           on_trial: Callable[[Trial], None] | None = None) -> SearchResult:
    """Run NSGA-II until ``cfg.total_trials`` unique genomes have been evaluated.

    `evaluator(genome, trial_index)` returns an ObjectiveVector or raises
    TrialFailed; any other exception aborts the run with SearchAborted
    carrying the trials completed so far. Re-encountered genomes reuse
    cached objectives and do not consume budget. Evaluation may be spread
    over ``cfg.workers`` threads; results are applied in trial order, so
    the outcome does not depend on scheduling.
    """
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    spec = cfg.objectives()
    names = tuple(n for n, _ in spec)
    senses = tuple(s for _, s in spec)
    worst = _WorstCase(senses)
    cache: dict[str, ObjectiveVector] = {}
    trials: list[Trial] = []
    first_index: dict[str, int] = {}
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None

    def run_one(g: ArchitectureGenome, idx: int):
        t0 = time.perf_counter()
        try:
            ov = evaluator(g, idx)
            failed = False
        except TrialFailed as exc:
            log.warning("trial %d failed: %s", idx, exc)
            ov, failed = None, True
        return ov, failed, time.perf_counter() - t0

    def evaluate_batch(genomes: list[ArchitectureGenome], generation: int) -> list[Individual]:
        fresh: list[tuple[ArchitectureGenome, str, int]] = []
        for g in genomes:
            key = sp.genome_key(g)
            if key in cache or any(key == k for _, k, _ in fresh):
                continue
            if len(trials) + len(fresh) >= cfg.total_trials:
                break
            fresh.append((g, key, len(trials) + len(fresh)))
        try:
            if pool is not None:
                results = list(pool.map(lambda t: run_one(t[0], t[2]), fresh))
            else:
                results = [run_one(g, idx) for g, _, idx in fresh]
        except Exception as exc:
            raise SearchAborted(f"evaluator error: {exc!r}", trials) from exc
        for (g, key, idx), (ov, failed, wall) in zip(fresh, results):
            if failed:
                ov = worst.vector(names)
            else:
                if ov.senses != senses:
                    raise SearchAborted("evaluator returned wrong objective senses", trials)
                ov = ObjectiveVector(ov.values, senses, names)
                worst.observe(ov)
            cache[key] = ov
            first_index[key] = idx
            trial = Trial(idx, g, key, ov, wall, failed, generation)
            trials.append(trial)
            if on_trial is not None:
                on_trial(trial)
        out, seen = [], set()
        for g in genomes:
            key = sp.genome_key(g)
            if key in cache and key not in seen:
                seen.add(key)
                out.append(Individual(g, cache[key], trial_index=first_index[key]))
        return out

    try:
        # generation 0: sample until population_size distinct genomes are in hand
        initial: list[ArchitectureGenome] = []
        keys: set[str] = set()
        attempts = 0
        while len(initial) < cfg.population_size and attempts < 1000 * cfg.population_size:
            g = sp.sample(space, rng)
            attempts += 1
            if sp.genome_key(g) not in keys:
                keys.add(sp.genome_key(g))
                initial.append(g)
        population = evaluate_batch(initial, 0)
        fronts = non_dominated_sort(population)
        assign_crowding(population, fronts)

        generation, stale = 0, 0
        while len(trials) < cfg.total_trials and stale < cfg.max_stale_generations:
            generation += 1
            before = len(trials)
            offspring: list[ArchitectureGenome] = []
            while len(offspring) < cfg.population_size:
                a = tournament(population, rng).genome
                b = tournament(population, rng).genome
                if rng.random() < cfg.crossover_prob:
                    a, b = sp.crossover(a, b, rng)
                offspring.append(sp.mutate(a, space, cfg.mutation_rate, rng))
                offspring.append(sp.mutate(b, space, cfg.mutation_rate, rng))
            children = evaluate_batch(offspring, generation)
            merged: dict[str, Individual] = {}
            for ind in population + children:
                merged.setdefault(ind.key, ind)
            population = environmental_selection(list(merged.values()), cfg.population_size)
            stale = stale + 1 if len(trials) == before else 0
    finally:
        if pool is not None:
            pool.shutdown()

    archive = pareto_archive(trials)
    return SearchResult(archive, trials, generation, cfg, population)


def pareto_archive(trials: Sequence[Trial]) -> list[Individual]:
    """Non-dominated set over all evaluated (unique) genomes, in trial order."""
    unique: dict[str, Trial] = {}
    for t in trials:
        unique.setdefault(t.key, t)
    pop = [Individual(t.genome, t.objectives, trial_index=t.trial_index) for t in unique.values()]
    if not pop:
        return []
    fronts = non_dominated_sort(pop)
    assign_crowding(pop, fronts)
    return sorted((pop[i] for i in fronts[0]), key=lambda ind: ind.trial_index)


def pareto_filter(archive: Sequence[Individual], min_accuracy: float,
                  objective: str = "accuracy") -> list[Individual]:
    """Members whose accuracy is strictly greater than `min_accuracy`."""
    return [ind for ind in archive if ind.objectives.get(objective) > min_accuracy]
