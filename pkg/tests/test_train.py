import math

import numpy as np
import pytest

from prunekit.data import two_gaussians
from prunekit.dtypes import precision
from prunekit.errors import ContractError, DivergenceError, InconsistentConfigError
from prunekit.nn import build_mlp
from prunekit.prune import SparsityTarget
from prunekit.sparsity import SparsityObjective
from prunekit.train import (SGD, TrainConfig, cosine_lr, evaluate,
                            run_experiment, train_step)
from prunekit.tensor import Tensor

SQRT2 = math.sqrt(2.0)


@pytest.fixture(scope="module")
def toy():
    return two_gaussians(n_train=600, n_test=200, seed=9)


def test_cosine_lr_anchors():
    assert cosine_lr(0, 100, 0.5, 0.1) == pytest.approx(0.5)
    assert cosine_lr(50, 100, 0.5, 0.1) == pytest.approx(0.3)
    assert cosine_lr(100, 100, 0.5, 0.1) == pytest.approx(0.5)  # restart
    assert cosine_lr(99, 100, 0.5, 0.1) < 0.101 + 0.4 * 0.001


def test_cosine_lr_invalid_period():
    with pytest.raises(ContractError):
        cosine_lr(0, 0, 0.1)


def test_config_mode_consistency():
    with pytest.raises(InconsistentConfigError):
        TrainConfig(mode="fixed_ga")
    with pytest.raises(InconsistentConfigError):
        TrainConfig(mode="adaptive")
    with pytest.raises(InconsistentConfigError):
        TrainConfig(mode="sparse-magic")


def test_dense_equals_fixed_zero_sparsity(toy):
    spec = build_mlp(2, [8], 2, np.random.default_rng(1)).to_spec()
    dense = run_experiment(TrainConfig(mode="dense", epochs=2, seed=4,
                                       batch_size=50), toy, spec=spec)
    fixed = run_experiment(
        TrainConfig(mode="fixed_bs", epochs=2, seed=4, batch_size=50,
                    target=SparsityTarget(s=0.0, epsilon=1e-3)),
        toy, spec=spec)
    for (n1, p1), (n2, p2) in zip(dense.net.named_params(),
                                  fixed.net.named_params()):
        assert n1 == n2
        if n1.endswith("bound"):
            continue  # solver state differs; the trajectory must not
        np.testing.assert_array_equal(p1.data, p2.data)
    assert dense.test_accuracy == fixed.test_accuracy
    assert fixed.report.overall_param_sparsity == 0.0


def test_adaptive_single_step_bound_update_hand_computed():
    # 4-weight layer, lambda=0: the bound moves by -lr * task-gradient with
    # the straight-through formula sum_pruned (-w_i / b) * g_i
    with precision(64):
        rng = np.random.default_rng(0)
        net = build_mlp(2, [], 2, rng, bias=False)  # single 2x2 linear
        net.set_pruning("ste")
        (name, p), = net.prunables()
        w = np.array([[0.05, 1.0], [-0.08, -1.2]])
        p.weights.data = w.copy()
        sigma = p.refresh_sigma()
        p.bound.requires_grad = True
        b0 = 0.1 / sigma  # absolute threshold 0.1 prunes the two small weights
        p.bound.data = np.asarray(b0)

        cfg = TrainConfig(mode="adaptive", epochs=1, lr=0.5, momentum=0.0,
                          weight_decay=0.0,
                          objective=SparsityObjective(variant="avg", lam=0.0))
        opt = SGD(net.named_params(), momentum=0.0, weight_decay=0.0)
        xb = np.array([[1.0, 2.0], [0.5, -1.0]])
        yb = np.array([0, 1])

        # oracle: gradient of the loss w.r.t. the pruned tensor, assembled
        # by hand from the softmax cross-entropy derivative
        wt = np.where(np.abs(w) < b0 * sigma, 0.0, w)
        logits = xb @ wt
        soft = np.exp(logits - logits.max(axis=1, keepdims=True))
        soft /= soft.sum(axis=1, keepdims=True)
        soft[np.arange(2), yb] -= 1.0
        g_wt = xb.T @ (soft / 2.0)
        expected_grad_b = float(((wt - w) / b0 * g_wt).sum())

        train_step(net, (xb, yb), cfg, opt, [p], cfg.objective,
                   iteration=0, epoch=0, lr=cfg.lr)
        assert float(p.bound.data) == pytest.approx(
            max(b0 - 0.5 * expected_grad_b, 0.0), rel=1e-10)


def test_fixed_ga_post_step_sparsity_window(toy):
    spec = build_mlp(2, [64, 64], 2, np.random.default_rng(2)).to_spec()
    res = run_experiment(
        TrainConfig(mode="fixed_ga", epochs=1, seed=1, batch_size=100,
                    target=SparsityTarget(s=0.85, epsilon=1e-3)),
        toy, spec=spec)
    # Gaussian-initialised weights keep the Gaussian solver honest
    for row in res.report.rows:
        assert 0.80 <= row.sparsity <= 0.90


def test_fixed_bs_hits_target_precisely(toy):
    spec = build_mlp(2, [64, 64], 2, np.random.default_rng(2)).to_spec()
    res = run_experiment(
        TrainConfig(mode="fixed_bs", epochs=2, seed=1, batch_size=100,
                    target=SparsityTarget(s=0.85, epsilon=1e-3)),
        toy, spec=spec)
    total = res.report.dense_params
    assert abs(res.report.overall_param_sparsity - 0.85) < 1e-3 + 10.0 / total


def test_same_seed_bit_identical_metrics(toy):
    spec = build_mlp(2, [16], 2, np.random.default_rng(3)).to_spec()
    cfg = TrainConfig(mode="fixed_ga", epochs=2, seed=7, batch_size=64,
                      target=SparsityTarget(s=0.5), log_interval=1)

    def run():
        res = run_experiment(cfg, toy, spec=spec)
        return [(m.iteration, m.task_loss, m.overall_sparsity, m.lr,
                 m.test_accuracy) for m in res.metrics]

    assert run() == run()


def test_weight_decay_decoupled_at_zero_lr(toy):
    spec = build_mlp(2, [8], 2, np.random.default_rng(5)).to_spec()
    wd = 0.01
    cfg = TrainConfig(mode="adaptive", epochs=1, seed=2, batch_size=200,
                      lr=0.0, lr_min=0.0, weight_decay=wd,
                      objective=SparsityObjective(variant="avg", lam=1.0))
    from prunekit.nn import build_network
    net = build_network(spec, np.random.default_rng([2, 0]))
    w_before = {n: p.data.copy() for n, p in net.named_params()}
    steps = math.ceil(600 / 200) * 1
    res = run_experiment(cfg, toy, net=net)
    for name, p in res.net.named_params():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "weight":
            np.testing.assert_allclose(
                p.data, w_before[name] * (1 - wd) ** steps, rtol=1e-5)
        elif leaf == "bound":
            init = SQRT2 * 0.044340  # erf_inv(0.05) ~ 0.044340
            assert float(p.data) == pytest.approx(init, abs=1e-4)


def test_pruning_never_mutates_weights_outside_update(toy):
    spec = build_mlp(2, [16], 2, np.random.default_rng(6)).to_spec()
    from prunekit.nn import build_network
    net = build_network(spec, np.random.default_rng(42))
    net.set_pruning("ste")
    for _, p in net.prunables():
        sigma = p.refresh_sigma()
        p.bound.data = np.asarray(1.0, dtype=p.bound.data.dtype)
    w_before = {n: p.data.copy() for n, p in net.named_params()}
    x = Tensor(toy.x_train[:32])
    from prunekit.tensor import backward, cross_entropy_logits
    loss = cross_entropy_logits(net.forward(x), toy.y_train[:32])
    backward(loss)
    for name, p in net.named_params():
        np.testing.assert_array_equal(p.data, w_before[name])


def test_divergence_guard(toy):
    spec = build_mlp(2, [8], 2, np.random.default_rng(5)).to_spec()
    from prunekit.nn import build_network
    net = build_network(spec, np.random.default_rng(0))
    net.modules[0][1].param.weights.data[:] = np.nan
    with pytest.raises(DivergenceError):
        run_experiment(TrainConfig(mode="dense", epochs=1, seed=0), toy, net=net)


def test_masked_mode_blocks_pruned_updates(toy):
    # single optimizer step: coordinates pruned by that step's mask must
    # come out bit-identical (no straight-through update, no decay)
    spec = build_mlp(2, [16], 2, np.random.default_rng(8)).to_spec()
    cfg = TrainConfig(mode="fixed_ga", epochs=1, seed=3, batch_size=600,
                      ste=False, momentum=0.0, weight_decay=0.0,
                      target=SparsityTarget(s=0.6))
    from prunekit.nn import build_network
    from prunekit.special import erf_inv_scalar
    net = build_network(spec, np.random.default_rng([3, 0]))
    w_before = {n: p.data.copy() for n, p in net.named_params()
                if n.endswith("weight")}
    res = run_experiment(cfg, toy, net=net)
    for name, p in res.net.prunables():
        w0 = w_before[name + ".weight"]
        thr = SQRT2 * erf_inv_scalar(0.6) * float(np.std(w0))
        frozen = np.abs(w0) < thr  # the mask of the only training step
        assert frozen.any()
        np.testing.assert_array_equal(p.weights.data[frozen], w0[frozen])
        changed = p.weights.data[~frozen] != w0[~frozen]
        assert changed.any()


def test_exempt_layer_keeps_dense(toy):
    spec = build_mlp(2, [16], 2, np.random.default_rng(8)).to_spec()
    cfg = TrainConfig(mode="fixed_ga", epochs=1, seed=3, batch_size=100,
                      target=SparsityTarget(s=0.8),
                      exempt_layers=("classifier",))
    res = run_experiment(cfg, toy, spec=spec)
    names = [r.name for r in res.report.rows]
    assert "classifier" not in names
    assert all(r.sparsity > 0.5 for r in res.report.rows)


def test_evaluate_counts_correctly(toy):
    spec = build_mlp(2, [24], 2, np.random.default_rng(10)).to_spec()
    res = run_experiment(TrainConfig(mode="dense", epochs=3, seed=5,
                                     batch_size=64), toy, spec=spec)
    acc = evaluate(res.net, toy.x_test, toy.y_test)
    assert acc == res.eval_history[-1][1]
    assert acc > 0.85  # linearly separable blobs
