import math

import numpy as np
import pytest

from prunekit import tensor as T
from prunekit.errors import ContractError
from prunekit.nn import (Conv2d, Linear, attained_sparsity, build_cnn_small,
                         build_mlp, build_network, build_wrn, count_flops,
                         count_params)
from prunekit.prune import solve_bound_binary_search, SparsityTarget
from prunekit.tensor import Tensor


def test_count_params_single_conv(rng):
    conv = Conv2d(16, 32, 3, rng, bias=True)
    spec, _ = conv.describe("conv.", (8, 8))
    assert spec[0].param_count == 16 * 32 * 9 + 32 == 4640
    assert spec[0].weight_count == 16 * 32 * 9


def _wrn_reference_params(k: int, classes: int = 100) -> int:
    # independent closed form for the standard 16-layer wide residual net
    # (conv biases and batchnorm affine included)
    total = 3 * 16 * 9 + 16  # stem
    widths = [16 * k, 32 * k, 64 * k]
    cin = 16
    for w in widths:
        for b in range(2):
            total += 2 * cin + cin * w * 9 + w + 2 * w + w * w * 9 + w
            if cin != w:
                total += cin * w + w
            cin = w
    total += 2 * cin
    total += cin * classes + classes
    return total


def test_wrn_16_8_parameter_count():
    spec = build_wrn(16, 8, 100).to_spec()
    assert count_params(spec) == _wrn_reference_params(8)
    assert abs(count_params(spec) - 11.012e6) / 11.012e6 <= 0.005


def test_wrn_16_3_parameter_count_literal():
    # the literal width-3 build; the published 1.672M figure is the
    # channel-scaled equivalent model, covered by the acceptance suite
    spec = build_wrn(16, 3, 100).to_spec()
    assert count_params(spec) == _wrn_reference_params(3) == 1_568_596


def test_wrn_monotone_in_width():
    p1 = count_params(build_wrn(16, 1, 10).to_spec())
    p2 = count_params(build_wrn(16, 2, 10).to_spec())
    assert p1 < p2


def test_wrn_invalid_depth():
    with pytest.raises(ContractError):
        build_wrn(15, 2, 10)


def test_count_flops_pointwise_conv(rng):
    conv = Conv2d(1, 1, 1, rng, bias=False)
    spec, _ = conv.describe("c.", (4, 4))
    assert spec[0].flop_count == 2 * 16 == 32


def test_count_flops_manual_recount(rng):
    net = build_cnn_small((1, 8, 8), (4, 6), 3, rng)
    spec = net.to_spec()
    # conv1: 2*1*4*9 * 8*8 ; conv2: 2*4*6*9 * 4*4 ; fc: 2 * (6*2*2) * 3
    expected = {"conv1": 2 * 1 * 4 * 9 * 64, "conv2": 2 * 4 * 6 * 9 * 16,
                "classifier": 2 * 24 * 3}
    got = {l.name: l.flop_count for l in spec.layers if l.flop_count}
    assert got == expected
    assert count_flops(spec) == sum(expected.values())


def test_flops_scale_linearly_with_density(rng):
    net = build_cnn_small((1, 8, 8), (4, 6), 3, rng)
    for _, p in net.prunables():
        sigma = p.refresh_sigma()
        res = solve_bound_binary_search(p.weights, SparsityTarget(s=0.5, epsilon=0.02))
        p.bound.data = np.asarray(res.bound / sigma, dtype=p.bound.data.dtype)
    rep = attained_sparsity(net)
    for row in rep.rows:
        assert row.kept_flops == int(round((1 - row.sparsity) * row.flop_count))


def test_bias_and_batchnorm_never_prunable():
    spec = build_wrn(16, 1, 10).to_spec()
    for layer in spec.layers:
        if layer.kind == "batchnorm":
            assert not layer.prunable
        if layer.prunable:
            assert layer.kind in ("conv2d", "linear")
            # weight_count excludes the bias term
            bias = layer.c_out if layer.has_bias else 0
            assert layer.param_count == layer.weight_count + bias


def test_attained_sparsity_dense_start(rng):
    net = build_mlp(4, [8], 3, rng)
    rep = attained_sparsity(net)
    assert all(r.sparsity == 0.0 for r in rep.rows)
    assert rep.overall_param_sparsity == 0.0


def test_attained_sparsity_forced_half(rng):
    net = build_mlp(4, [4], 2, rng, bias=False)
    for _, p in net.prunables():
        n = p.weights.data.size
        half = np.concatenate([np.full(n // 2, 0.1), np.full(n - n // 2, 1.0)])
        signs = np.where(rng.normal(size=n) > 0, 1.0, -1.0)
        p.weights.data = (half * signs).reshape(p.weights.data.shape) \
            .astype(p.weights.data.dtype)
        sigma = p.refresh_sigma()
        p.bound.data = np.asarray(0.5 / sigma, dtype=p.bound.data.dtype)
    rep = attained_sparsity(net)
    assert rep.overall_param_sparsity == pytest.approx(0.5)
    assert rep.kept_params == rep.dense_params // 2


def test_attained_sparsity_fixed_bs_contract(rng):
    net = build_mlp(30, [40, 40], 4, rng)
    target = SparsityTarget(s=0.85, epsilon=5e-3)
    for _, p in net.prunables():
        sigma = p.refresh_sigma()
        res = solve_bound_binary_search(p.weights, target)
        p.bound.data = np.asarray(res.bound / sigma, dtype=p.bound.data.dtype)
    rep = attained_sparsity(net)
    for row in rep.rows:
        assert abs(row.sparsity - 0.85) < 5e-3 + 1.0 / row.weight_count


def test_prunable_forward_zero_bound_matches_vanilla(rng):
    lin = Linear(6, 5, rng)
    lin.prune_mode = "ste"
    x = Tensor(rng.normal(size=(3, 6)).astype(np.float32))
    pruned_out = lin.forward(x)
    lin2 = Linear(6, 5, rng)
    lin2.param.weights.data = lin.param.weights.data.copy()
    lin2.bias.data = lin.bias.data.copy()
    vanilla = lin2.forward(x)
    np.testing.assert_allclose(pruned_out.data, vanilla.data, atol=1e-6)


def test_prunable_forward_full_prune_leaves_bias(rng):
    lin = Linear(6, 5, rng)
    lin.prune_mode = "ste"
    lin.bias.data = rng.normal(size=5).astype(np.float32)
    sigma = lin.param.refresh_sigma()
    lin.param.bound.data = np.asarray(
        np.abs(lin.param.weights.data).max() * 2 / sigma, dtype=np.float32)
    out = lin.forward(Tensor(rng.normal(size=(4, 6)).astype(np.float32)))
    np.testing.assert_allclose(out.data, np.tile(lin.bias.data, (4, 1)),
                               atol=1e-7)


def test_prunable_forward_equals_hard_shrink_compose(rng):
    from prunekit.prune import hard_shrink

    lin = Linear(7, 4, rng, bias=False)
    lin.prune_mode = "ste"
    sigma = lin.param.refresh_sigma()
    lin.param.bound.data = np.asarray(1.0, dtype=np.float32)
    x = rng.normal(size=(5, 7)).astype(np.float32)
    out = lin.forward(Tensor(x))
    expected = x @ hard_shrink(lin.param.weights.data, 1.0 * lin.param.sigma)
    np.testing.assert_allclose(out.data, expected, atol=1e-12)


def test_dense_counts_invariant_under_pruning(rng):
    net = build_cnn_small((1, 8, 8), (4, 6), 3, rng)
    before = count_params(net.to_spec())
    for _, p in net.prunables():
        sigma = p.refresh_sigma()
        p.bound.data = np.asarray(1.0, dtype=p.bound.data.dtype)
    attained_sparsity(net)
    assert count_params(net.to_spec()) == before


def test_build_network_round_trip_structure(rng):
    net = build_cnn_small((1, 8, 8), (5, 7), 4, rng)
    spec = net.to_spec()
    rebuilt = build_network(spec, rng)
    assert rebuilt.to_spec().structure == spec.structure
    assert count_params(rebuilt.to_spec()) == count_params(spec)


def test_set_pruning_exempt_layers(rng):
    net = build_mlp(4, [5, 5], 2, rng)
    net.set_pruning("ste", exempt=("classifier",))
    modes = {name: None for name, _ in net.prunables()}
    for name, m in net.modules:
        if isinstance(m, Linear):
            modes[name] = m.prune_mode
    assert modes["fc1"] == "ste"
    assert modes["classifier"] == "off"
    with pytest.raises(ContractError):
        net.set_pruning("ste", exempt=("nonexistent",))


def test_wrn_forward_shape(rng):
    net = build_wrn(10, 1, 7, rng, in_shape=(3, 16, 16))
    out = net.forward(Tensor(rng.normal(size=(2, 3, 16, 16)).astype(np.float32)))
    assert out.shape == (2, 7)
