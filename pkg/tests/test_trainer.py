import itertools
import math

import numpy as np
import pytest

from feedalign import data as D
from feedalign import feedback as fb
from feedalign import layers as L
from feedalign import trainer as tr
from feedalign.errors import ConfigError, DataError, DimensionError, StateError


def mlp(strategy="bp", init="random", widths=(16, 16), act="tanh", n_in=2, classes=2, seed=0, precision="float64"):
    layers = []
    for w in widths:
        layers += [f"fc:{w}"] + ([act] if act else [])
    spec = tr.NetworkSpec(layers + [f"fc:{classes}"], (n_in,), classes, strategy, init, precision=precision)
    return tr.Network(spec, seed)


def cnn(strategy="bp", init="random", seed=0, fc_act=None):
    tail = ["fc:5"] + ([fc_act] if fc_act else []) + ["fc:4"] + ([fc_act] if fc_act else []) + ["fc:3"]
    layers = ["conv:2", "bn", "relu", "maxpool:2", "conv:3", "relu", "flatten"] + tail
    spec = tr.NetworkSpec(layers, (2, 6, 6), 3, strategy, init, precision="float64")
    return tr.Network(spec, seed)


# -- loss --------------------------------------------------------------------------

def test_uniform_logits_loss_is_log_classes():
    loss, e = tr.softmax_cross_entropy(np.zeros((4, 10)), [0, 3, 9, 2])
    assert math.isclose(loss, math.log(10), rel_tol=1e-15)
    np.testing.assert_allclose(e.sum(axis=1), 0, atol=1e-15)


def test_saturated_logits():
    logits = np.array([[800.0, 0.0, 0.0]])
    loss, e = tr.softmax_cross_entropy(logits, [0])
    assert loss == 0.0 and np.all(np.abs(e) < 1e-300)


def test_error_is_finite_difference_of_per_sample_loss():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((3, 6))
    y = np.array([1, 5, 0])
    _, e = tr.softmax_cross_entropy(logits, y)
    h = 1e-6
    num = np.zeros_like(logits)
    for i, j in itertools.product(range(3), range(6)):
        p, m = logits.copy(), logits.copy()
        p[i, j] += h
        m[i, j] -= h
        # the batch loss is a mean, so the per-sample derivative carries a factor B
        num[i, j] = 3 * (tr.softmax_cross_entropy(p, y)[0] - tr.softmax_cross_entropy(m, y)[0]) / (2 * h)
    np.testing.assert_allclose(e, num, atol=1e-7)


@pytest.mark.parametrize("labels", [[0, 3], [-1, 0], [0]])
def test_bad_labels(labels):
    with pytest.raises(DataError):
        tr.softmax_cross_entropy(np.zeros((2, 3)), labels)


# -- layout ------------------------------------------------------------------------

@pytest.mark.parametrize("layers,classes", [
    (["fc:4", "relu", "conv:2", "fc:2"], 2),
    (["fc:4", "relu"], 4),
    (["fc:4", "fc:3"], 2),
    (["relu"], 2),
    (["fc:4", "bogus", "fc:2"], 2),
    (["conv:2", "fc:2"], 2),
])
def test_layout_validation(layers, classes):
    shape = (2,) if layers[0] != "conv:2" else (1, 4, 4)
    with pytest.raises(ConfigError):
        tr.Network(tr.NetworkSpec(layers, shape, classes), 0)


@pytest.mark.parametrize("strategy,init", [("dfa", "sign-product"), ("fa", "sign-product"), ("xx", "random"),
                                           ("dfa", "nope")])
def test_invalid_strategy_init_combinations(strategy, init):
    with pytest.raises(ConfigError):
        tr.NetworkSpec(["fc:2"], (2,), 2, strategy, init)


def test_conv_bias_dropped_before_batchnorm():
    net = cnn()
    assert "bias" not in net.layers[0].params
    assert "bias" in net.layers[4].params


def test_feedback_shapes():
    fa = mlp("fa", widths=(7, 5), classes=3)
    assert sorted(fa.feedback) == [1, 2]
    assert fa.feedback[1].shape == (7, 5) and fa.feedback[2].shape == (5, 3)
    d = mlp("dfa", widths=(7, 5), classes=3)
    assert sorted(d.feedback) == [0, 1]
    assert d.feedback[0].shape == (7, 3) and d.feedback[1].shape == (5, 3)
    b = mlp("bdfa", "sign-product", widths=(7, 5), classes=3)
    assert all(isinstance(m, fb.BinaryFeedbackMatrix) for m in b.feedback.values())
    assert mlp("bp").feedback == {}


def test_same_seed_same_network():
    a, b = mlp("dfa", seed=3), mlp("dfa", seed=3)
    assert a.feedback_bytes() == b.feedback_bytes()
    assert all(np.array_equal(l1.params[n], b.layers[i].params[n])
               for i, l1 in enumerate(a.layers) for n in l1.params)


# -- strategies --------------------------------------------------------------------

def run_backward(net, x, y, strategy=None, order=None):
    logits = net.forward(x, train=True)
    _, e = tr.softmax_cross_entropy(logits, y)
    errs = tr.backward(net, e, strategy, order)
    return errs, tr.collect_grads(net)


def test_single_linear_layer_squared_error_by_hand():
    layer = L.FullyConnected(2, 1, rng=np.random.default_rng(0), dtype=np.float64)
    layer.params["weight"] = np.array([[0.5, -1.0]])
    x = np.array([[2.0, 1.0]])
    out = layer.forward(x)  # 0.0
    e = out - np.array([[1.0]])  # dL/dout for L = 0.5 (out - t)^2
    layer.backward(e)
    np.testing.assert_array_equal(layer.grads["weight"], [[-2.0, -1.0]])
    np.testing.assert_array_equal(layer.grads["bias"], [-1.0])


@pytest.mark.parametrize("strategy", ["bp", "fa", "dfa", "bdfa"])
def test_zero_output_error_gives_zero_gradients(strategy):
    net = cnn(strategy, "sign-product" if strategy == "bdfa" else "random")
    x = np.random.default_rng(0).standard_normal((3, 2, 6, 6))
    net.forward(x, train=True)
    tr.backward(net, np.zeros((3, 3)))
    assert all(not g.any() for g in tr.collect_grads(net).values())


def test_backward_without_forward_is_state_error():
    with pytest.raises(StateError):
        tr.backward(mlp(), np.zeros((2, 2)))


def test_dfa_without_conv_is_plain_dfa():
    net = mlp("dfa", widths=(6, 5), classes=3)
    rng = np.random.default_rng(1)
    x, y = rng.standard_normal((4, 2)), rng.integers(0, 3, 4)
    errs, grads = run_backward(net, x, y)
    _, e = tr.softmax_cross_entropy(net.forward(x, train=True), y)
    for k, (_, i, tail) in enumerate(net.blocks()[:-1]):
        f = net.layers[tail[0]].fprime()
        expected = (e @ net.feedback[k].values.T) * f
        np.testing.assert_allclose(errs[i], expected, rtol=1e-12)
    np.testing.assert_array_equal(errs[4], e)


def test_fa_with_product_feedback_is_bp_at_step_zero():
    x = np.random.default_rng(2).standard_normal((5, 2, 6, 6))
    y = np.array([0, 1, 2, 1, 0])
    _, g_bp = run_backward(cnn("bp", fc_act="tanh"), x, y)
    _, g_fa = run_backward(cnn("fa", "product", fc_act="tanh"), x, y)
    assert all(np.array_equal(g_bp[k], g_fa[k]) for k in g_bp)


@pytest.mark.parametrize("seed", range(8))
def test_product_dfa_matches_bp_on_linear_tail(seed):
    rng = np.random.default_rng(100 + seed)
    x, y = rng.standard_normal((4, 2, 6, 6)), rng.integers(0, 3, 4)
    e_bp, g_bp = run_backward(cnn("bp", seed=seed), x, y)
    e_d, g_d = run_backward(cnn("dfa", "product", seed=seed), x, y)
    for j in e_bp:
        np.testing.assert_allclose(e_d[j], e_bp[j], rtol=1e-6, atol=1e-12)
    for k in g_bp:
        np.testing.assert_allclose(g_d[k], g_bp[k], rtol=1e-6, atol=1e-12)


def test_random_dfa_differs_from_bp():
    rng = np.random.default_rng(5)
    x, y = rng.standard_normal((4, 2, 6, 6)), rng.integers(0, 3, 4)
    _, g_bp = run_backward(cnn("bp"), x, y)
    _, g_d = run_backward(cnn("dfa", "random"), x, y)
    assert not np.allclose(g_bp["7.weight"], g_d["7.weight"])
    assert np.array_equal(g_bp["9.weight"], g_d["9.weight"])  # output layer is always exact


@pytest.mark.parametrize("strategy,init", [("dfa", "random"), ("bdfa", "sign-product")])
def test_dfa_block_order_is_irrelevant(strategy, init):
    rng = np.random.default_rng(9)
    x, y = rng.standard_normal((4, 2, 6, 6)), rng.integers(0, 3, 4)
    ref_e, ref_g = run_backward(cnn(strategy, init, fc_act="relu"), x, y)
    for order in [(1, 0)]:
        e, g = run_backward(cnn(strategy, init, fc_act="relu"), x, y, order=order)
        assert all(np.array_equal(ref_e[j], e[j]) for j in ref_e)
        assert all(np.array_equal(ref_g[k], g[k]) for k in ref_g)


def test_bad_order_rejected():
    net = cnn("dfa")
    net.forward(np.zeros((2, 2, 6, 6)), train=True)
    with pytest.raises(ValueError):
        tr.backward(net, np.zeros((2, 3)), order=[0, 0])


def test_missing_feedback_is_config_error():
    net = mlp("dfa")
    net.forward(np.zeros((2, 2)), train=True)
    del net.feedback[0]
    with pytest.raises(ConfigError):
        tr.backward(net, np.zeros((2, 2)))


# -- optimiser ---------------------------------------------------------------------

def _one_fc_net():
    net = mlp(widths=(), act=None, classes=2)
    layer = net.layers[0]
    layer.grads = {"weight": np.full((2, 2), 0.5), "bias": np.array([1.0, -1.0])}
    return net, layer


def test_plain_step_without_momentum_or_decay():
    net, layer = _one_fc_net()
    w0 = layer.params["weight"].copy()
    h = tr.Hyperparams(lr=0.1, momentum=0.0, weight_decay=0.0)
    tr.sgd_momentum_step(net, tr.TrainState(), h)
    np.testing.assert_array_equal(layer.params["weight"], w0 - 0.1 * 0.5)
    np.testing.assert_array_equal(layer.params["bias"], [-0.1, 0.1])


def test_zero_gradient_zero_velocity_is_noop():
    net, layer = _one_fc_net()
    layer.grads = {k: np.zeros_like(v) for k, v in layer.params.items()}
    before = {k: v.copy() for k, v in layer.params.items()}
    tr.sgd_momentum_step(net, tr.TrainState(), tr.Hyperparams(weight_decay=0.0))
    assert all(np.array_equal(before[k], layer.params[k]) for k in before)


def test_two_momentum_steps_on_constant_gradient():
    net, layer = _one_fc_net()
    b0 = layer.params["bias"].copy()
    state = tr.TrainState()
    h = tr.Hyperparams(lr=0.5, momentum=0.9, weight_decay=0.0)
    tr.sgd_momentum_step(net, state, h)
    b1 = layer.params["bias"].copy()
    tr.sgd_momentum_step(net, state, h)
    g = np.array([1.0, -1.0])
    np.testing.assert_allclose(b1 - b0, -0.5 * g, rtol=1e-15)
    np.testing.assert_allclose(layer.params["bias"] - b1, -0.5 * 1.9 * g, rtol=1e-15)
    assert state.step == 2


def test_weight_decay_skips_bias():
    net, layer = _one_fc_net()
    layer.params["bias"] = np.array([2.0, 2.0])
    layer.grads = {k: np.zeros_like(v) for k, v in layer.params.items()}
    w0 = layer.params["weight"].copy()
    tr.sgd_momentum_step(net, tr.TrainState(), tr.Hyperparams(lr=1.0, weight_decay=0.1))
    np.testing.assert_array_equal(layer.params["bias"], [2.0, 2.0])
    np.testing.assert_allclose(layer.params["weight"], w0 * 0.9, rtol=1e-15)


def test_gradient_shape_mismatch():
    net, layer = _one_fc_net()
    layer.grads["weight"] = np.zeros((3, 2))
    with pytest.raises(DimensionError):
        tr.sgd_momentum_step(net, tr.TrainState(), tr.Hyperparams())


@pytest.mark.parametrize("kw", [dict(lr=-1), dict(batch=0), dict(momentum=1.0), dict(weight_decay=-1),
                                dict(lr_decay_factor=0)])
def test_hyperparam_validation(kw):
    with pytest.raises(ConfigError):
        tr.Hyperparams(**kw)


def test_step_decay_schedule():
    h = tr.Hyperparams(lr=0.1, lr_decay_factor=0.1, lr_decay_every=40)
    assert h.lr_at(0) == 0.1 and h.lr_at(39) == 0.1
    assert math.isclose(h.lr_at(40), 0.01) and math.isclose(h.lr_at(80), 0.001)
    assert tr.Hyperparams(lr=0.3).lr_at(1000) == 0.3


# -- loop ----------------------------------------------------------------------------

def test_zero_lr_single_sample_epoch():
    net = mlp()
    ds = D.two_moons(2, 0.1, seed=0).subset([0])
    before = [v.copy() for _, l, n in net.named_params() for v in [l.params[n]]]
    initial = tr.evaluate(net, ds)["loss"]
    m = tr.train_epoch(net, ds, tr.Hyperparams(lr=0.0, batch=1), tr.TrainState())
    after = [l.params[n] for _, l, n in net.named_params()]
    assert all(np.array_equal(a, b) for a, b in zip(before, after))
    assert m["loss"] == initial


def test_empty_dataset():
    ds = D.Dataset(np.zeros((0, 2)), np.zeros(0, int), 2)
    with pytest.raises(DataError):
        tr.train_epoch(mlp(), ds, tr.Hyperparams(), tr.TrainState())
    with pytest.raises(DataError):
        tr.evaluate(mlp(), ds)


def test_fit_is_deterministic():
    ds = D.two_moons(60, 0.1, seed=1)
    h = tr.Hyperparams(lr=0.1, batch=20, epochs=3, seed=4)
    runs = []
    for _ in range(2):
        net = mlp("bdfa", "sign-product", precision="float32")
        state, rows = tr.fit(net, ds, h, ds)
        runs.append((rows, [l.params[n].tobytes() for _, l, n in net.named_params()]))
    assert runs[0] == runs[1]
    assert runs[0][0][0] == tr.METRICS_HEADER and len(runs[0][0]) == 7


def test_feedback_frozen_unless_refresh():
    ds = D.two_moons(60, 0.1, seed=1)
    h = tr.Hyperparams(lr=0.1, batch=20, epochs=3)
    net = mlp("dfa", "product")
    before = net.feedback_bytes()
    tr.fit(net, ds, h)
    assert net.feedback_bytes() == before
    spec = tr.NetworkSpec(net.spec.layers, (2,), 2, "dfa", "product", feedback_refresh=True, precision="float64")
    net = tr.Network(spec, 0)
    tr.fit(net, ds, h)
    assert net.feedback_bytes() != before


def test_moons_trains_with_dfa():
    ds = D.two_moons(500, 0.1, seed=0)
    net = mlp("dfa", precision="float32")
    tr.fit(net, ds, tr.Hyperparams(lr=0.1, batch=100, epochs=60))
    assert tr.evaluate(net, ds)["top1"] >= 0.95


# -- evaluation ----------------------------------------------------------------------

def test_onehot_logits_are_fully_correct():
    y = np.array([0, 2, 1, 2])
    assert tr.topk_hits(np.eye(3)[y], y, 1) == 4


def test_top5_with_five_classes_always_hits():
    rng = np.random.default_rng(0)
    assert tr.topk_hits(rng.standard_normal((50, 5)), rng.integers(0, 5, 50), 5) == 50


def test_ties_go_to_lower_index():
    logits = np.zeros((3, 4))
    y = np.array([0, 1, 3])
    assert tr.topk_hits(logits, y, 1) == 1
    assert tr.topk_hits(logits, y, 2) == 2


def test_random_logits_hit_rates():
    rng = np.random.default_rng(7)
    n = 20000
    logits, y = rng.standard_normal((n, 10)), rng.integers(0, 10, n)
    for k, p in ((1, 0.1), (5, 0.5)):
        sigma = math.sqrt(n * p * (1 - p))
        assert abs(tr.topk_hits(logits, y, k) - n * p) <= 3 * sigma


def test_evaluate_reports_fractions():
    net = mlp(classes=3)
    ds = D.gaussian_blobs(30, 3, 0.5, seed=0)
    m = tr.evaluate(net, ds, batch=7)
    assert 0 <= m["top1"] <= m["top5"] == 1.0
