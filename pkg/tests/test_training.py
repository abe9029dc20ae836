import io
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evoked import autodiff as ad
from evoked.model import BackboneConfig, build_st
from evoked.training import (Adam, EncodedSplit, TrainConfig, TrainingError, adam_step, compute_class_weights,
                             l1_penalty, train, train_step, weighted_bce, weighted_bce_value)
from gradcases import tiny_mt


# -- class weights and loss -------------------------------------------------------------

def test_class_weight_examples():
    labels = np.array([1, 1] + [0] * 8)
    w = compute_class_weights(labels)
    assert w.w_pos[0] == 2.5 and w.w_neg[0] == 0.625
    w = compute_class_weights(np.array([0, 1, 0, 1]))
    assert w.w_pos[0] == 1.0 and w.w_neg[0] == 1.0
    with pytest.raises(ValueError, match="only one class"):
        compute_class_weights(np.ones(5, int))


def test_class_weights_ignore_masked_entries():
    labels = np.array([[1], [0], [1], [1]])
    mask = np.array([[True], [True], [False], [False]])
    w = compute_class_weights(labels, mask)
    assert w.w_pos[0] == 1.0 and w.w_neg[0] == 1.0


@pytest.mark.parametrize("frac", [0.1, 0.38, 0.62, 0.9])
def test_constant_half_gives_ln2(frac):
    n = 1000
    labels = (np.arange(n) < frac * n).astype(int)
    w = compute_class_weights(labels)
    assert abs(weighted_bce_value(np.full(n, 0.5), labels, w) - math.log(2)) < 1e-12


def test_loss_examples():
    w = compute_class_weights(np.array([0, 1]))
    assert weighted_bce_value([1.0, 0.0], [1, 0], w) < 1e-11
    single = weighted_bce_value([0.25, 0.9], [1, 0], w, mask=[True, False])
    assert single == pytest.approx(-math.log(0.25), abs=1e-12)


def loss_oracle(p, y, m):
    """Direct evaluation of the weighted log-loss, averaged over targets with labels."""
    vals = []
    for t in range(y.shape[1]):
        present = m[:, t]
        if not present.any():
            continue
        yt, pt = y[present, t], np.clip(p[present, t], 1e-12, 1 - 1e-12)
        n, npos = len(yt), yt.sum()
        wt = np.where(yt == 1, n / (2 * npos), n / (2 * (n - npos)))
        vals.append(-np.sum(wt * (yt * np.log(pt) + (1 - yt) * np.log(1 - pt))) / wt.sum())
    return np.mean(vals)


def test_multi_target_loss_matches_oracle(rng):
    y = rng.integers(0, 2, size=(40, 4))
    y[:2] = [[0] * 4, [1] * 4]
    m = rng.random(size=y.shape) < 0.7
    m[:2] = True
    m[2:, 2] = False  # target 2 only has the two forced rows
    p = rng.uniform(0.01, 0.99, size=y.shape)
    w = compute_class_weights(y, m)
    assert weighted_bce_value(p, y, w, m) == pytest.approx(loss_oracle(p, y, m), rel=1e-12)


label_sets = st.lists(st.integers(0, 1), min_size=2, max_size=200).filter(lambda v: 0 < sum(v) < len(v))


@settings(max_examples=200, deadline=None)
@given(label_sets)
def test_weight_mass_is_balanced(labels):
    y = np.array(labels)
    w = compute_class_weights(y)
    pos = w.w_pos[0] * y.sum()
    neg = w.w_neg[0] * (len(y) - y.sum())
    assert abs(pos - neg) < 1e-9


@settings(max_examples=200, deadline=None)
@given(label_sets)
def test_loss_orders_perfect_chance_and_inverted(labels):
    y = np.array(labels)
    w = compute_class_weights(y)
    perfect = weighted_bce_value(y.astype(float), y, w)
    chance = weighted_bce_value(np.full(len(y), 0.5), y, w)
    inverted = weighted_bce_value(1.0 - y, y, w)
    assert perfect <= chance <= inverted


def test_loss_errors():
    w = compute_class_weights(np.array([[0, 1], [1, 0]]))
    with pytest.raises(ValueError, match="branch was not evaluated"):
        weighted_bce([ad.constant(np.full((2, 1), 0.5)), None], np.array([[0, 1], [1, 0]]), w)
    with pytest.raises(ValueError, match="no present"):
        weighted_bce_value(np.full((2, 2), 0.5), np.array([[0, 1], [1, 0]]), w, np.zeros((2, 2), bool))


# -- L1 -------------------------------------------------------------------------------

class Holder:
    def __init__(self, **arrays):
        self.params = {k.replace("_", "."): ad.Parameter(k, v) for k, v in arrays.items()}


def test_l1_examples():
    assert float(l1_penalty(Holder(a_weight=np.zeros(3)), 0.1).value) == 0.0
    h = Holder(a_weight=np.array([1.0, -2.0]), a_bias=np.array([5.0]))
    assert float(l1_penalty(h, 0.1).value) == pytest.approx(0.3, abs=1e-15)
    h.params["a.bias"].assign(np.array([-40.0]))
    assert float(l1_penalty(h, 0.1).value) == pytest.approx(0.3, abs=1e-15)
    with pytest.raises(ValueError):
        l1_penalty(h, -1.0)


def test_l1_gradient_is_lambda_sign():
    h = Holder(a_weight=np.array([1.5, -2.0, 0.0]), a_bias=np.array([3.0]))
    ad.backward(l1_penalty(h, 0.1))
    assert h.params["a.weight"].grad.tolist() == [0.1, -0.1, 0.0]
    assert h.params["a.bias"].grad is None


# -- Adam -----------------------------------------------------------------------------

def test_adam_first_step():
    p = ad.Parameter("w", [1.0])
    p.node.grad = np.array([2.0])
    adam_step([p], Adam(lr=1e-3))
    assert p.value[0] == pytest.approx(0.999, abs=1e-10)


def test_adam_zero_gradient_leaves_params():
    p = ad.Parameter("w", [1.0, -3.0])
    p.node.grad = np.zeros(2)
    Adam().step([p])
    assert p.value.tolist() == [1.0, -3.0]


def test_adam_matches_reference_and_is_deterministic(rng):
    grads = rng.normal(size=(20, 5))
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    theta, m, v = np.linspace(-1, 1, 5), np.zeros(5), np.zeros(5)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    runs = []
    for _ in range(2):
        p, opt = ad.Parameter("w", np.linspace(-1, 1, 5)), Adam(lr, b1, b2, eps)
        for g in grads:
            p.node.grad = g.copy()
            opt.step([p])
        runs.append(p.value.copy())
    np.testing.assert_allclose(runs[0], theta, rtol=1e-13, atol=1e-15)
    assert np.array_equal(runs[0], runs[1])


def test_adam_skips_params_without_gradient():
    a, b = ad.Parameter("a", [1.0]), ad.Parameter("b", [1.0])
    a.node.grad = np.array([1.0])
    opt = Adam()
    opt.step([a, b])
    assert b.value[0] == 1.0 and "b" not in opt.m
    with pytest.raises(ad.ShapeError):
        a.node.grad = np.ones(3)
        opt.step([a])


# -- masked steps ---------------------------------------------------------------------

def mt_batch(rng, n=8, viewers=2, drop=None):
    labels = rng.integers(0, 2, size=(n, viewers + 1))
    mask = np.ones(labels.shape, bool)
    if drop is not None:
        mask[:, drop] = False
    return EncodedSplit(rng.integers(0, 20, size=(n, 18)), rng.normal(size=(n, 3)), labels, mask,
                        [f"V{i + 1}" for i in range(viewers)] + ["Vavg"])


@pytest.mark.parametrize("k", [0, 1])
def test_step_leaves_masked_branch_untouched(rng, k):
    model = tiny_mt(seed=k)
    opt = Adam()
    weights = compute_class_weights(np.array([[0, 0, 0], [1, 1, 1]]))
    train_step(model, mt_batch(rng), weights, opt, TrainConfig())  # moments exist for every branch
    before = model.state()
    moments = {n: (opt.m[n].copy(), opt.v[n].copy()) for n in opt.m}
    train_step(model, mt_batch(rng, drop=k), weights, opt, TrainConfig())
    for n, p in model.params.items():
        if n.startswith(f"branch{k}."):
            assert np.array_equal(p.value, before[n])
            assert np.array_equal(opt.m[n], moments[n][0]) and np.array_equal(opt.v[n], moments[n][1])
    assert not np.array_equal(model.params["trunk.fc0.weight"].value, before["trunk.fc0.weight"])


def test_full_batch_moves_every_branch(rng):
    model = tiny_mt()
    before = model.state()
    weights = compute_class_weights(np.array([[0, 0, 0], [1, 1, 1]]))
    train_step(model, mt_batch(rng), weights, Adam(), TrainConfig())
    for b in range(3):
        assert not np.array_equal(model.params[f"branch{b}.out.weight"].value, before[f"branch{b}.out.weight"])


# -- training loop --------------------------------------------------------------------

def st_data(rng, n=40, signal=2.0):
    visual = rng.normal(size=(n, 3))
    y = (visual[:, 0] > 0).astype(int)
    visual[:, 1] += signal * (2 * y - 1)
    return EncodedSplit(None, visual, y[:, None], np.ones((n, 1), bool), ["Vavg"])


def st_model(seed=0):
    cfg = BackboneConfig(vocab_size=5, feature_dim=3)
    return build_st(cfg, seed, "visual", head=(8, 4))


def test_train_is_deterministic_and_logs(rng):
    tr, va = st_data(rng), st_data(rng, 20)
    cfg = TrainConfig(batch_size=8, max_epochs=6, patience=10, learning_rate=1e-2)
    outs = []
    for _ in range(2):
        buf = io.StringIO()
        res = train(st_model(), tr, va, cfg, buf)
        lines = [json.loads(x) for x in buf.getvalue().splitlines()]
        outs.append((res.model.state(), lines))
    assert [e["epoch"] for e in outs[0][1]] == list(range(1, 7))
    assert outs[0][1] == outs[1][1]
    for n in outs[0][0]:
        assert np.array_equal(outs[0][0][n], outs[1][0][n])


def test_early_stopping_and_best_restore(rng):
    tr = st_data(rng)
    va = st_data(rng, 20)
    cfg = TrainConfig(batch_size=8, max_epochs=50, patience=2, learning_rate=1e-2)
    res = train(st_model(), tr, va, cfg)
    scores = [e["val_accuracy"]["Vavg"] for e in res.log]
    assert res.best_score == max(scores)
    assert res.best_epoch == scores.index(max(scores)) + 1  # earliest epoch among ties
    if len(res.log) < 50:
        assert "early_stop" in res.log[-1]["events"]
        assert len(res.log) - res.best_epoch == 2
    probs = res.model.predict(None, va.visual)[:, 0]
    acc = 100.0 * np.mean((probs > 0.5) == va.labels[:, 0])
    assert acc == pytest.approx(res.best_score)


def test_without_validation_keeps_last_epoch(rng):
    res = train(st_model(), st_data(rng), None, TrainConfig(batch_size=8, max_epochs=3))
    assert res.best_epoch == 3 and len(res.log) == 3


def test_non_finite_aborts_with_diagnostics(rng):
    model = st_model()
    model.params["head.out.weight"].assign(np.full((4, 1), 1e308))
    model.params["head.fc1.bias"].assign(np.full(4, 1e10))
    with pytest.raises(TrainingError, match="epoch 1, batch 0"):
        train(model, st_data(rng), None, TrainConfig(batch_size=8, max_epochs=1))


def test_train_rejects_mismatched_targets(rng):
    with pytest.raises(ValueError, match="targets"):
        train(tiny_mt(), st_data(rng), None, TrainConfig(max_epochs=1))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"nope": 1})
