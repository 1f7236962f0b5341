
import numpy as np
import pytest

from hwnas import data as dt
from hwnas import local_search as ls
from hwnas import space as sp
from hwnas import trainer as tr
from hwnas.estimator import ResourceEstimate


@pytest.fixture(scope="module")
def blob_net():
    space = sp.SearchSpaceConfig(input_dim=16)
    g = sp.ArchitectureGenome(4, (64, 32, 16, 32, 32, 32, 16, 32), "ReLU", False, 0.001, 0.0, 0.0)
    return sp.decode(g, space)


@pytest.fixture(scope="module")
def large_blobs():
    # enough rows that the default 5-epoch warm-up converges before pruning starts
    ds = dt.synth_blobs(1000, 16, 5, 6.0, seed=0)
    train, val, test = dt.split(ds, (0.6, 0.2, 0.2), seed=0)
    norm = dt.fit_normalizer(train)
    return norm.apply(train), norm.apply(val), norm.apply(test)


@pytest.fixture(scope="module")
def default_run(blob_net, large_blobs, tmp_path_factory):
    train, val, _ = large_blobs
    out = tmp_path_factory.mktemp("ls")
    return ls.local_search(blob_net, train, val, ls.LocalSearchConfig(seed=0), out_dir=out), out


def test_default_schedule(default_run):
    records, _ = default_run
    assert len(records) == 11
    total = sum(w.size for w in records[0].params.weights)
    for k, r in enumerate(records):
        assert r.iteration == k
        assert abs(r.sparsity - (1 - 0.8 ** k)) <= k / total
    assert records[0].weight_bits == 32 and all(r.weight_bits == 8 for r in records[1:])
    assert records[3].sparsity == pytest.approx(0.488, abs=1e-3)
    assert records[10].sparsity == pytest.approx(0.893, abs=1e-3)


def test_sparsity_increasing_and_bops_nonincreasing(default_run):
    records, _ = default_run
    sp_ = [r.sparsity for r in records]
    assert all(a < b for a, b in zip(sp_, sp_[1:]))
    bops = [r.bops for r in records[1:]]
    assert all(a >= b for a, b in zip(bops, bops[1:]))
    assert records[1].estimate.dsp == 0


def test_accuracy_retained_near_half_sparsity(default_run):
    records, _ = default_run
    assert abs(records[3].val_accuracy - records[0].val_accuracy) <= 0.05


def test_persisted_checkpoints(default_run):
    records, out = default_run
    back = ls.read_checkpoints_csv(out / "checkpoints.csv")
    assert [r.iteration for r in back] == list(range(11))
    assert [r.sparsity for r in back] == [r.sparsity for r in records]
    for r in back:
        params, manifest = tr.load_params(out / r.weights_path)
        assert manifest["iteration"] == r.iteration
        assert params.sparsity() == r.sparsity


def test_iterations_zero(blob_net, blobs_splits):
    train, val, _ = blobs_splits
    recs = ls.local_search(blob_net, train, val, ls.LocalSearchConfig(warmup_epochs=1, iterations=0))
    assert len(recs) == 1 and recs[0].sparsity == 0 and recs[0].weight_bits == 32


def test_local_search_deterministic(blob_net, blobs_splits):
    train, val, _ = blobs_splits
    cfg = ls.LocalSearchConfig(warmup_epochs=1, iterations=2, epochs_per_iteration=1, seed=7)
    a = ls.local_search(blob_net, train, val, cfg)
    b = ls.local_search(blob_net, train, val, cfg)
    assert [r.row() for r in a] == [r.row() for r in b]


def rec(k, s, acc):
    return ls.CheckpointRecord(k, s, 8, acc, 0, ResourceEstimate())


def test_select_default_schedule_picks_three():
    records = [rec(k, 1 - 0.8 ** k, 0.9) for k in range(11)]
    assert ls.select_checkpoint(records, 0.5).iteration == 3


def test_select_single_and_empty():
    assert ls.select_checkpoint([rec(0, 0.0, 0.5)]).iteration == 0
    with pytest.raises(ls.EmptyRecordsError):
        ls.select_checkpoint([])


def test_select_tie_prefers_accuracy():
    assert ls.select_checkpoint([rec(1, 0.4, 0.7), rec(2, 0.6, 0.8)], 0.5).iteration == 2


def test_select_respects_floor_and_falls_back():
    records = [rec(0, 0.0, 0.9), rec(1, 0.5, 0.6)]
    assert ls.select_checkpoint(records, 0.5, min_accuracy=0.8).iteration == 0
    with pytest.warns(ls.AccuracyFallbackWarning):
        assert ls.select_checkpoint(records, 0.5, min_accuracy=0.95).iteration == 0


def test_export_roundtrip_bitwise(default_run, blob_net, large_blobs, tmp_path):
    records, _ = default_run
    _, val, _ = large_blobs
    chosen = ls.select_checkpoint(records, 0.5)
    path = ls.export_model(chosen, blob_net, tmp_path, provenance={"seed": 0})
    model, manifest = ls.load_model(path)
    ref = tr.TrainedModel(blob_net, chosen.params)
    assert np.array_equal(tr.predict(model, val.features), tr.predict(ref, val.features))
    assert tr.evaluate(model, val) == chosen.val_accuracy
    assert manifest["provenance"] == {"seed": 0}
    assert (tmp_path / "weights.bin").exists()
    for w, s in zip(model.params.weights, manifest["weight_scales"]):
        q = w.astype(np.float64) / s
        assert np.max(np.abs(q - np.round(q))) < 1e-3
        assert np.array_equal(np.round(w / np.float32(s)) * np.float32(s), w)
    dense = [l for l in model.net.layers if l.kind == "dense"]
    assert all(l.weight_bits == 8 for l in dense)
    assert [l.sparsity for l in dense] == chosen.params.layer_sparsities()


def test_export_full_precision_weights_unchanged(default_run, blob_net, tmp_path):
    records, _ = default_run
    path = ls.export_model(records[0], blob_net, tmp_path)
    model, manifest = ls.load_model(path)
    assert manifest["weight_scales"] == [None] * len(model.params.weights)
    assert all(np.array_equal(a, b) for a, b in zip(model.params.weights, records[0].params.weights))


def test_export_from_weights_file(default_run, blob_net, tmp_path):
    records, out = default_run
    r = ls.read_checkpoints_csv(out / "checkpoints.csv")[3]
    model, _ = ls.load_model(ls.export_model(r, blob_net, tmp_path, base_dir=out))
    assert all(np.array_equal(a, tr.effective_weight(records[3].params, i))
               for i, a in enumerate(model.params.weights))


def test_config_validation():
    with pytest.raises(ValueError):
        ls.LocalSearchConfig(prune_fraction=1.0)
    with pytest.raises(ValueError):
        ls.LocalSearchConfig(iterations=-1)
