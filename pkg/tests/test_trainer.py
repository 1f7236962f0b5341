import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from hwnas import netir as ir
from hwnas import space as sp
from hwnas import trainer as tr
from hwnas.data import Dataset


def linear_net(n, m):
    return ir.NetworkDescription((ir.dense(n, m),), n, m)


def small_net(act="Tanh", bn=False, dims=(4, 6, 5, 3)):
    layers = []
    for i, (n, m) in enumerate(zip(dims, dims[1:])):
        layers.append(ir.dense(n, m))
        if i < len(dims) - 2:
            if bn:
                layers.append(ir.batchnorm(m))
            layers.append(ir.activation(act, m))
    return ir.NetworkDescription(tuple(layers), dims[0], dims[-1])


def minimal_default_net(space):
    g = sp.ArchitectureGenome(4, (64, 32, 16, 32, 32, 32, 16, 32), "ReLU", False, 0.001, 0.0, 0.0)
    return sp.decode(g, space)


def test_forward_hand_example():
    net = linear_net(2, 1)
    p = tr.init_params(net, 0, np.float64)
    p.weights[0][:] = [[1.0], [-1.0]]
    p.biases[0][:] = [0.5]
    assert tr.forward(p, net, np.array([[3.0, 1.0]]))[0, 0] == 2.5


def test_zero_network_gives_zero_logits(rng):
    net = small_net("Sigmoid", bn=True)
    p = tr.init_params(net, 0)
    for w in p.weights:
        w[:] = 0
    out = tr.forward(p, net, rng.standard_normal((7, 4)))
    assert np.all(out == 0)


def test_eval_forward_deterministic(rng):
    net = small_net("ReLU", bn=True)
    p = tr.init_params(net, 1)
    x = rng.standard_normal((5, 4))
    assert np.array_equal(tr.forward(p, net, x), tr.forward(p, net, x))


def test_forward_shape_error(rng):
    net = small_net()
    with pytest.raises(ir.ShapeError):
        tr.forward(tr.init_params(net, 0), net, rng.standard_normal((3, 5)))


def test_batchnorm_train_vs_eval(rng):
    net = ir.NetworkDescription((ir.dense(3, 3), ir.batchnorm(3), ir.dense(3, 2)), 3, 2)
    p = tr.init_params(net, 0, np.float64)
    x = rng.standard_normal((64, 3)) * 5 + 2
    cache = []
    tr.forward(p, net, x, "train", cache=cache, update_stats=False)
    xhat = next(e for e in cache if e[0] == "bn")[2]
    np.testing.assert_allclose(xhat.mean(0), 0, atol=1e-12)
    np.testing.assert_allclose(xhat.var(0), 1, rtol=1e-3)
    h = x @ p.weights[0]
    tr.forward(p, net, x, "train")
    np.testing.assert_allclose(p.bn_mean[0], 0.1 * h.mean(0))
    np.testing.assert_allclose(p.bn_var[0], 0.9 + 0.1 * h.var(0))


def test_inverted_dropout_scaling():
    net = ir.NetworkDescription((ir.dense(1, 1000), ir.dropout(0.25, 1000), ir.dense(1000, 1)), 1, 1)
    p = tr.init_params(net, 0, np.float64)
    p.weights[0][:] = 1.0
    p.weights[1][:] = 1.0 / 1000
    x = np.ones((200, 1))
    out = tr.forward(p, net, x, "train", rng=np.random.default_rng(0))
    assert abs(out.mean() - 1.0) < 0.01
    assert np.all(tr.forward(p, net, x, "eval") == pytest.approx(1.0))


def test_train_zero_epochs_returns_init(blobs_splits):
    train, val, _ = blobs_splits
    net = small_net(dims=(16, 8, 5))
    m = tr.train(net, train, val, tr.TrainConfig(epochs=0, seed=3))
    assert m.history == []
    ref = tr.init_params(net, 3)
    assert all(np.array_equal(a, b) for a, b in zip(m.params.weights, ref.weights))


def test_train_deterministic(blobs_splits):
    train, val, _ = blobs_splits
    net = small_net("ReLU", bn=True, dims=(16, 8, 5))
    cfg = tr.TrainConfig(epochs=2, seed=5)
    a, b = tr.train(net, train, val, cfg), tr.train(net, train, val, cfg)
    assert a.history == b.history
    assert all(np.array_equal(x, y) for x, y in zip(a.params.weights, b.params.weights))


def test_masked_weights_stay_zero(blobs_splits):
    train, val, _ = blobs_splits
    net = small_net(dims=(16, 8, 5))
    p = tr.prune_step(tr.init_params(net, 0), 0.5)
    m = tr.train(net, train, val, tr.TrainConfig(epochs=2, l1=1e-3), params=p)
    for w, mask in zip(m.params.weights, m.params.masks):
        assert np.all(w[mask == 0] == 0)


def test_l1_shrinks_weights(blobs_splits):
    train, val, _ = blobs_splits
    net = small_net(dims=(16, 8, 5))
    mean_abs = lambda m: np.mean(np.concatenate([np.abs(w).ravel() for w in m.params.weights]))  # noqa: E731
    plain = tr.train(net, train, val, tr.TrainConfig(epochs=5, seed=0))
    sparse = tr.train(net, train, val, tr.TrainConfig(epochs=5, l1=1.0, seed=0))
    assert mean_abs(sparse) < mean_abs(plain)


def test_divergence_raises(blobs_splits):
    train, val, _ = blobs_splits
    net = small_net(dims=(16, 8, 5))
    p = tr.init_params(net, 0)
    p.weights[0][0, 0] = np.nan
    with pytest.raises(tr.TrainingDivergedError):
        tr.train(net, train, val, tr.TrainConfig(epochs=1), params=p)


def test_blobs_trainable(blobs_splits, default_space):
    train, val, _ = blobs_splits
    net = minimal_default_net(default_space)
    m = tr.train(net, train, val, tr.TrainConfig.for_network(net, 30, seed=0))
    assert m.history[-1]["val_accuracy"] >= 0.95
    assert [h["epoch"] for h in m.history] == list(range(30))


def test_evaluate_tie_breaks_to_class_zero(rng):
    net = linear_net(3, 4)
    p = tr.init_params(net, 0)
    p.weights[0][:] = 0
    ds = Dataset(rng.standard_normal((20, 3)), np.zeros(20, int), 4)
    assert tr.evaluate(tr.TrainedModel(net, p), ds) == 1.0


def test_evaluate_perfect_oracle():
    net = linear_net(3, 3)
    p = tr.init_params(net, 0, np.float64)
    p.weights[0][:] = np.eye(3)
    x = np.eye(3)[[0, 1, 2, 2, 1]]
    assert tr.evaluate(tr.TrainedModel(net, p), Dataset(x, np.array([0, 1, 2, 2, 1]), 3)) == 1.0


def test_evaluate_random_labels_near_chance():
    rng = np.random.default_rng(0)
    net = small_net(dims=(4, 8, 5))
    model = tr.TrainedModel(net, tr.init_params(net, 0))
    ds = Dataset(rng.standard_normal((10_000, 4)), rng.integers(0, 5, 10_000), 5)
    # binomial sd at p=0.2, N=1e4 is 0.004; 0.02 is five sigma
    assert abs(tr.evaluate(model, ds) - 0.2) <= 0.02


def test_fake_quantize_hand_example():
    x = np.array([-1.0, -0.5, 0.0, 0.5, 1.0])
    s = tr.quant_scale(x, 8)
    assert s == pytest.approx(1 / 127, rel=1e-12)
    assert np.max(np.abs(tr.fake_quantize(x, 8) - x)) <= s / 2


def test_fake_quantize_zeros():
    assert np.array_equal(tr.fake_quantize(np.zeros(4, np.float32), 8), np.zeros(4))


def test_fake_quantize_bad_bits():
    with pytest.raises(ValueError):
        tr.fake_quantize(np.ones(3), 1)


@settings(max_examples=300, deadline=None)
@given(x=hnp.arrays(np.float32, hnp.array_shapes(max_dims=2, max_side=40),
                    elements=st.floats(-1e4, 1e4, width=32)),
       bits=st.integers(2, 16))
def test_fake_quantize_contract(x, bits):
    s = tr.quant_scale(x, bits)
    assume(not np.any(x) or s >= np.finfo(np.float32).tiny)
    q = tr.fake_quantize(x, bits)
    assert len(np.unique(q)) <= 2 ** bits - 1
    assert np.all(np.abs(q - x) <= s / 2 * (1 + 1e-5))
    assert np.array_equal(tr.fake_quantize(q, bits), q)


def test_straight_through_gradient(rng):
    # with QAT on, the weight gradient is computed as if the quantizer were identity
    net = linear_net(3, 2)
    p = tr.init_params(net, 0, np.float64)
    p.quant = tr.QuantConfig(True, 4, 16)
    x, y = rng.standard_normal((6, 3)), np.array([0, 1, 0, 1, 1, 0])
    _, g = tr.loss_and_grads(p, net, x, y, 0.0, "eval")
    logits = x @ tr.fake_quantize(p.weights[0], 4) + p.biases[0]
    _, dlog = tr.cross_entropy(logits, y)
    np.testing.assert_allclose(g["dense0.weight"], x.T @ dlog)


def test_prune_hand_example():
    net = linear_net(5, 1)
    p = tr.init_params(net, 0, np.float64)
    p.weights[0][:, 0] = [5, -4, 3, -2, 1]
    out = tr.prune_step(p, 0.4)
    assert out.weights[0][:, 0].tolist() == [5, -4, 3, 0, 0]
    assert p.masks[0].all()   # input untouched


def test_prune_fraction_zero_noop():
    net = small_net()
    p = tr.init_params(net, 0)
    out = tr.prune_step(p, 0.0)
    assert all(np.array_equal(a, b) for a, b in zip(out.masks, p.masks))


def test_prune_never_touches_bias_or_bn():
    net = small_net(bn=True)
    p = tr.init_params(net, 0)
    out = tr.prune_step(p, 0.5)
    for a, b in zip(out.biases + out.bn_gamma, p.biases + p.bn_gamma):
        assert np.array_equal(a, b)


def test_sparsity_schedule_closed_form():
    net = ir.NetworkDescription((ir.dense(100, 60), ir.activation("ReLU", 60), ir.dense(60, 40)), 100, 40)
    p = tr.init_params(net, 0)
    total = sum(w.size for w in p.weights)
    assert total == 8_400
    for k in range(1, 11):
        prev = [m.copy() for m in p.masks]
        p = tr.prune_step(p, 0.2)
        assert abs(p.sparsity() - (1 - 0.8 ** k)) <= k / total
        assert all(np.all(m <= q) for m, q in zip(p.masks, prev))


def test_gradient_check_linear():
    assert tr.gradient_check(linear_net(4, 3), seed=0) < 1e-7


def test_gradient_check_tanh_batchnorm():
    assert tr.gradient_check(small_net("Tanh", bn=True), seed=1) < 1e-4
    assert tr.gradient_check(small_net("Tanh", bn=True), seed=1, mode="train") < 1e-4


def test_gradient_check_relu_away_from_kinks():
    assert tr.gradient_check(small_net("ReLU"), seed=2) < 1e-4


def test_gradient_check_with_l1():
    from dataclasses import replace
    assert tr.gradient_check(replace(small_net("Sigmoid"), l1=1e-3), seed=3) < 1e-4


def test_save_load_roundtrip(tmp_path):
    net = small_net("ReLU", bn=True)
    p = tr.prune_step(tr.init_params(net, 0), 0.3)
    p.quant = tr.QuantConfig(True, 6, 8)
    tr.save_params(p, tmp_path / "w.json", extra={"note": 1})
    q, manifest = tr.load_params(tmp_path / "w.json")
    assert manifest["note"] == 1 and q.quant == p.quant
    for a, b in zip(tr._arrays(p), tr._arrays(q)):
        assert a[0] == b[0] and np.array_equal(a[1], b[1])
