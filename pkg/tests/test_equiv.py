import math

import numpy as np
import pytest

from prunekit.equiv import dense_equivalent, equivalence_map
from prunekit.errors import ContractError
from prunekit.nn import build_cnn_small, build_mlp, build_wrn, count_params


@pytest.fixture(scope="module")
def wrn_16_8_spec():
    return build_wrn(16, 8, 100).to_spec()


def test_identity_ratio(wrn_16_8_spec):
    eq = dense_equivalent(wrn_16_8_spec, 1.0)
    assert eq.structure == wrn_16_8_spec.structure
    assert count_params(eq) == count_params(wrn_16_8_spec)


def test_quarter_ratio_halves_channels(rng):
    spec = build_cnn_small((3, 8, 8), (64, 128), 10, rng).to_spec()
    eq = dense_equivalent(spec, 0.25)
    assert eq.structure["widths"] == [32, 64]
    m = equivalence_map(spec, 0.25)
    assert m.channel_map["conv2"] == (32, 64)
    assert m.channel_map["conv1"] == (3, 32)  # image channels never scale


def test_wrn_equivalent_matches_published_size(wrn_16_8_spec):
    ratio = 1.672e6 / 11.012e6
    eq = dense_equivalent(wrn_16_8_spec, ratio)
    assert eq.structure["stem"] == 6
    assert eq.structure["widths"] == [49, 99, 199]
    assert abs(count_params(eq) - 1.672e6) / 1.672e6 <= 0.05


def test_stem_input_and_classes_unscaled(wrn_16_8_spec):
    eq = dense_equivalent(wrn_16_8_spec, 0.3)
    assert eq.input_shape == wrn_16_8_spec.input_shape
    assert eq.classes == wrn_16_8_spec.classes
    assert eq.layers[0].c_in == 3
    assert eq.layers[-1].c_out == 100


def test_params_strictly_decrease_with_ratio(wrn_16_8_spec):
    counts = [count_params(dense_equivalent(wrn_16_8_spec, r))
              for r in (1.0, 0.7, 0.4, 0.2, 0.1)]
    assert all(a > b for a, b in zip(counts, counts[1:]))


def test_composition_within_one_channel(wrn_16_8_spec):
    a, b = 0.6, 0.4
    two_step = dense_equivalent(dense_equivalent(wrn_16_8_spec, a), b)
    one_step = dense_equivalent(wrn_16_8_spec, a * b)
    for got, want in zip([two_step.structure["stem"]] + two_step.structure["widths"],
                         [one_step.structure["stem"]] + one_step.structure["widths"]):
        assert abs(got - want) <= 1


def test_interior_conv_ratio_bounds(wrn_16_8_spec):
    # convs whose both ends scale land in [r_c*(1-delta), r_c]
    for r_c in (0.25, 1.672e6 / 11.012e6):
        eq = dense_equivalent(wrn_16_8_spec, r_c)
        base_layers = {l.name: l for l in wrn_16_8_spec.layers}
        factor = math.sqrt(r_c)
        for layer in eq.layers:
            if layer.kind != "conv2d" or layer.name == "stem":
                continue
            base = base_layers[layer.name]
            if layer.c_in == base.c_in:  # input side unscaled
                continue
            ratio = layer.weight_count / base.weight_count
            delta = 2.0 / min(layer.c_in, layer.c_out)
            assert r_c * (1 - delta) <= ratio <= r_c


def test_mlp_hidden_scaling(rng):
    spec = build_mlp(2, [64, 64], 2, rng).to_spec()
    eq = dense_equivalent(spec, 0.25)
    assert eq.structure["hidden"] == [32, 32]
    assert eq.structure["in_dim"] == 2


def test_zero_channel_contract_error(rng):
    spec = build_cnn_small((1, 8, 8), (2, 4), 2, rng).to_spec()
    with pytest.raises(ContractError):
        dense_equivalent(spec, 0.01)
    with pytest.raises(ContractError):
        dense_equivalent(spec, 0.0)
    with pytest.raises(ContractError):
        dense_equivalent(spec, 1.5)
