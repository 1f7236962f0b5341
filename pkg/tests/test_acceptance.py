"""Acceptance criteria, one test each; every test records a PASS/FAIL line.

The lines are printed in the pytest terminal summary (see conftest.py) and
to stdout (visible with ``-s``).
"""

import itertools
import json
import math
import time
from pathlib import Path

import numpy as np

from conftest import ACCEPTANCE_LINES
from hwnas import data as dt
from hwnas import estimator as es
from hwnas import local_search as ls
from hwnas import netir as ir
from hwnas import nsga2 as ng
from hwnas import pipeline
from hwnas import space as sp
from hwnas import trainer as tr
from hwnas.config import parse_config

ROOT = Path(__file__).resolve().parents[1]


def record(num: int, title: str, ok: bool, detail: str) -> None:
    line = f"AC{num:02d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def brute_dominates(a, b):
    return all(x <= y for x, y in zip(a, b)) and any(x < y for x, y in zip(a, b))


def peel(points):
    left = list(range(len(points)))
    fronts = []
    while left:
        front = [i for i in left if not any(brute_dominates(points[j], points[i]) for j in left)]
        fronts.append(front)
        left = [i for i in left if i not in set(front)]
    return fronts


def mlp(dims, bits=8, act="ReLU", sparsity=0.0):
    layers = []
    for i, (n, m) in enumerate(zip(dims, dims[1:])):
        layers.append(ir.dense(n, m, weight_bits=bits, act_bits=bits, sparsity=sparsity))
        if i < len(dims) - 2:
            layers.append(ir.activation(act, m, weight_bits=bits, act_bits=bits))
    return ir.NetworkDescription(tuple(layers), dims[0], dims[-1])


def test_ac01_nondominated_sort_matches_peeling():
    rng = np.random.default_rng(2024)
    mismatches, elapsed = 0, 0.0
    senses = (ng.MAXIMIZE, ng.MINIMIZE, ng.MINIMIZE)
    for p in range(50):
        # alternate continuous and coarse-integer populations (the latter force ties)
        raw = rng.random((200, 3)) if p % 2 else rng.integers(0, 6, (200, 3)).astype(float)
        pop = [ng.Individual(None, ng.ObjectiveVector(tuple(r), senses)) for r in raw]
        t0 = time.perf_counter()
        fronts = ng.non_dominated_sort(pop)
        elapsed += time.perf_counter() - t0
        canon = [ind.objectives.canonical() for ind in pop]
        mismatches += [sorted(f) for f in fronts] != peel(canon)
    record(1, "NSGA-II sorting", mismatches == 0 and elapsed < 5.0,
           f"{mismatches}/50 populations differ from peeling oracle, sort time {elapsed:.3f}s (< 5s)")


def test_ac02_dominance_exhaustive_grid():
    grid = list(itertools.product(range(3), repeat=3))
    vecs = [ng.ObjectiveVector(p, (ng.MINIMIZE,) * 3) for p in grid]
    bad = sum(ng.dominates(va, vb) != brute_dominates(a, b)
              for a, va in zip(grid, vecs) for b, vb in zip(grid, vecs))
    record(2, "dominance oracle", bad == 0, f"{bad} disagreements over {len(grid) ** 2} pairs")


def test_ac03_crowding_distance():
    inf = math.inf
    hand = ng.crowding_distance([[0.0], [5.0], [10.0]]) == [inf, 1.0, inf]
    rng = np.random.default_rng(3)
    rules = True
    for _ in range(200):
        n, k = int(rng.integers(3, 30)), int(rng.integers(1, 4))
        F = rng.random((n, k))
        F[:, 0] = F[0, 0] if rng.random() < 0.3 else F[:, 0]   # sometimes a zero-range objective
        d = np.array(ng.crowding_distance(F))
        oracle = np.zeros(n)
        for j in range(k):
            order = np.argsort(F[:, j], kind="stable")
            span = F[order[-1], j] - F[order[0], j]
            oracle[order[0]] = oracle[order[-1]] = inf
            if span > 0:
                for a in range(1, n - 1):
                    oracle[order[a]] += (F[order[a + 1], j] - F[order[a - 1], j]) / span
        rules &= bool(np.allclose(d, oracle, rtol=1e-12, atol=0))
        if k == 1 and np.ptp(F[:, 0]) == 0:
            rules &= bool(np.all(d[1:-1] == 0))
    record(3, "crowding distance", hand and rules,
           f"(0,5,10) -> (inf,1.0,inf) {'exact' if hand else 'WRONG'}; 200 random fronts "
           f"{'match' if rules else 'differ from'} boundary/zero-range oracle")


def test_ac04_sparsity_schedule():
    net = ir.NetworkDescription((ir.dense(100, 100),), 100, 100)
    params = tr.init_params(net, 0)
    assert params.weights[0].size == 10_000
    worst, s3 = 0.0, None
    for k in range(1, 11):
        params = tr.prune_step(params, 0.2)
        worst = max(worst, abs(params.sparsity() - (1 - 0.8 ** k)))
        if k == 3:
            s3 = params.sparsity()
    record(4, "sparsity schedule", worst <= 0.001 and abs(s3 - 0.488) <= 0.001,
           f"max |sparsity - (1-0.8^k)| = {worst:.2e} (<= 1e-3); k=3 -> {s3:.4f}")


def test_ac05_qat_contract():
    rng = np.random.default_rng(5)
    max_levels, worst_err, idem = 0, 0.0, True
    for i in range(500):
        shape = tuple(rng.integers(1, 60, size=int(rng.integers(1, 3))))
        x = (rng.standard_normal(shape) * 10 ** rng.uniform(-3, 3)).astype(np.float32 if i % 2 else np.float64)
        q = tr.fake_quantize(x, 8)
        s = tr.quant_scale(x, 8)
        max_levels = max(max_levels, len(np.unique(q)))
        worst_err = max(worst_err, float(np.max(np.abs(q - x)) / s))
        idem &= bool(np.array_equal(tr.fake_quantize(q, 8), q))
    ok = max_levels <= 255 and worst_err <= 0.5 * (1 + 1e-5) and idem
    record(5, "QAT contract", ok, f"max distinct values {max_levels} (<= 255), max |q-x|/scale "
           f"{worst_err:.6f} (<= 0.5), idempotent bitwise: {idem}")


def test_ac06_gradient_check():
    rng = np.random.default_rng(6)
    worst, n_params = 0.0, []
    for i in range(20):
        act = ("Tanh", "Sigmoid", "ReLU")[i % 3]
        depth = int(rng.integers(1, 4))
        dims = [int(rng.integers(2, 9)) for _ in range(depth + 1)]
        bn = bool(rng.integers(0, 2))
        layers = []
        for j, (n, m) in enumerate(zip(dims, dims[1:])):
            layers.append(ir.dense(n, m))
            if j < depth - 1:
                if bn:
                    layers.append(ir.batchnorm(m))
                layers.append(ir.activation(act, m))
        net = ir.NetworkDescription(tuple(layers), dims[0], dims[-1], l1=float(rng.choice([0.0, 1e-4])))
        n_params.append(ir.param_count(net))
        worst = max(worst, tr.gradient_check(net, seed=i))
    record(6, "gradient check", worst < 1e-4 and max(n_params) <= 1000,
           f"max relative error {worst:.2e} over 20 nets (< 1e-4), float64")


def test_ac07_trainability():
    ds = dt.synth_blobs(200, 16, 5, 6.0, seed=0)
    train, val, _ = dt.split(ds, (0.6, 0.2, 0.2), seed=0)
    norm = dt.fit_normalizer(train)
    space = sp.SearchSpaceConfig(input_dim=16, num_classes=5)
    g = sp.ArchitectureGenome(4, (64, 32, 16, 32, 32, 32, 16, 32), "ReLU", False, 0.001, 0.0, 0.0)
    net = sp.decode(g, space)
    t0 = time.perf_counter()
    model = tr.train(net, norm.apply(train), norm.apply(val), tr.TrainConfig.for_network(net, 30, seed=0))
    elapsed = time.perf_counter() - t0
    best = max(h["val_accuracy"] for h in model.history)
    record(7, "trainability", best >= 0.95 and elapsed < 60,
           f"val accuracy {best:.3f} within 30 epochs (>= 0.95) in {elapsed:.2f}s (< 60s)")


def test_ac08_desk_search(tmp_path):
    doc = json.loads((ROOT / "configs" / "desk_blobs.json").read_text())
    default_space = sp.SearchSpaceConfig(input_dim=16, num_classes=5)
    outs = []
    t0 = time.perf_counter()
    for name in ("a", "b"):
        cfg = parse_config({**doc, "output_dir": str(tmp_path / name)}, ROOT / "configs")
        outs.append(pipeline.cmd_search(cfg))
    elapsed = time.perf_counter() - t0
    members = pipeline.pareto_individuals(pipeline.load_pareto(outs[0]))
    mutual = not any(ng.dominates(a.objectives, b.objectives) for a in members for b in members)
    valid = all(sp.is_valid(r_genome, default_space)
                for r_genome in map(pipeline.genome_from_row, pipeline.read_trials(outs[0])))
    n_trials = len(pipeline.read_trials(outs[0]))
    same = (outs[0] / "trials.csv").read_bytes() == (outs[1] / "trials.csv").read_bytes()
    ok = elapsed < 600 and mutual and valid and same and n_trials == 40
    record(8, "end-to-end desk run", ok,
           f"2 runs x {n_trials} trials in {elapsed:.1f}s (< 600s), {len(members)} Pareto members "
           f"non-dominated: {mutual}, default-space valid: {valid}, trials.csv byte-identical: {same}")


def test_ac09_estimator_arithmetic():
    baseline = es.ResourceEstimate(bram=4, dsp=262, ff=25_714, lut=155_080, latency_cycles=21)
    pct = es.utilization_pct(baseline, es.VU13P)
    printed = {"dsp": 2.1, "lut": 9.0, "ff": 0.7, "bram": 0.1}
    fields_ok = all(abs(pct[r] - v) <= 0.05 for r, v in printed.items())
    mean = es.avg_resource_pct(baseline, es.VU13P)
    mean_ok = abs(mean - sum(printed.values()) / 4) <= 0.05
    lat = es.latency_ns(baseline, es.VU13P)
    detail = ", ".join(f"{r} {pct[r]:.3f}% vs {v}" for r, v in printed.items())
    record(9, "estimator arithmetic", fields_ok and mean_ok and lat == 105.0,
           f"{detail}; mean {mean:.3f} vs 2.975; latency {lat:g} ns (105)")


def test_ac10_estimator_structure():
    rng = np.random.default_rng(10)
    space = sp.SearchSpaceConfig(input_dim=16)
    violations, dsp_nonzero = 0, 0
    for _ in range(200):
        depth = int(rng.integers(1, 6))
        dims = [int(rng.integers(1, 129)) for _ in range(depth + 1)]
        bits = int(rng.integers(2, 17))
        act = str(rng.choice(["ReLU", "Tanh", "Sigmoid"]))
        base = es.estimate(mlp(dims, bits, act))
        i = int(rng.integers(0, len(dims)))
        wider = dims[:i] + [dims[i] * 2] + dims[i + 1:]
        big = es.estimate(mlp(wider, bits, act))
        violations += big.lut < base.lut or big.latency_cycles < base.latency_cycles
        # threshold 0 routes every multiplier to DSP, so dsp is the multiplier count
        r1 = es.estimate(mlp(dims, bits, act), cfg=es.EstimatorConfig(1, dsp_bit_threshold=0))
        r4 = es.estimate(mlp(dims, bits, act), cfg=es.EstimatorConfig(4, dsp_bit_threshold=0))
        violations += r4.dsp > r1.dsp or r4.latency_cycles < r1.latency_cycles
        net8 = sp.decode(sp.sample(space, rng), space).with_precision(8)
        dsp_nonzero += es.estimate(net8).dsp != 0
    record(10, "estimator structure", violations == 0 and dsp_nonzero == 0,
           f"{violations} monotonicity violations over 200 nets; {dsp_nonzero} 8-bit nets with DSP > 0")


def test_ac11_bops():
    hand = (ir.count_bops(mlp([1, 1], bits=1)), ir.count_bops(mlp([16, 64], bits=8)))
    rng = np.random.default_rng(11)
    violations = 0
    for _ in range(200):
        dims = [int(rng.integers(1, 65)) for _ in range(int(rng.integers(2, 6)))]
        bits, s = int(rng.integers(1, 16)), float(rng.uniform(0, 0.9))
        base = ir.count_bops(mlp(dims, bits, sparsity=s))
        i = int(rng.integers(0, len(dims)))
        violations += ir.count_bops(mlp(dims[:i] + [dims[i] * 2] + dims[i + 1:], bits, sparsity=s)) < base
        violations += ir.count_bops(mlp(dims, bits + 1, sparsity=s)) < base
        violations += ir.count_bops(mlp(dims, bits, sparsity=min(s + 0.05, 0.95))) > base
    record(11, "BOPs", hand == (3, 86_016) and violations == 0,
           f"Dense(1,1)@1b -> {hand[0]} (3), Dense(16,64)@8b -> {hand[1]:,} (86,016); "
           f"{violations} monotonicity violations")


def test_ac12_export_roundtrip(tmp_path):
    ds = dt.synth_blobs(200, 16, 5, 6.0, seed=1)
    train, val, _ = dt.split(ds, (0.6, 0.2, 0.2), seed=1)
    norm = dt.fit_normalizer(train)
    train, val = norm.apply(train), norm.apply(val)
    space = sp.SearchSpaceConfig(input_dim=16)
    g = sp.ArchitectureGenome(5, (64, 32, 16, 32, 64, 32, 16, 32), "Tanh", True, 0.002, 1e-5, 0.05)
    net = sp.decode(g, space)
    records = ls.local_search(net, train, val, ls.LocalSearchConfig(iterations=3, epochs_per_iteration=2,
                                                                    warmup_epochs=2, seed=1), out_dir=tmp_path)
    chosen = ls.select_checkpoint(records, 0.5)
    model, _ = ls.load_model(ls.export_model(chosen, net, tmp_path / "export", base_dir=tmp_path))
    logits_equal = np.array_equal(tr.predict(model, val.features),
                                  tr.predict(tr.TrainedModel(net, chosen.params), val.features))
    acc = tr.evaluate(model, val)
    record(12, "export round-trip", logits_equal and acc == chosen.val_accuracy,
           f"checkpoint {chosen.iteration}: eval logits bitwise equal: {logits_equal}, "
           f"accuracy {acc} vs recorded {chosen.val_accuracy}")
