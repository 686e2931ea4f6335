import pytest

from prunekit.config import (dumps_config, echo_config, parse_config,
                             parse_config_text)
from prunekit.errors import (ConfigSyntaxError, InconsistentConfigError,
                             UnknownKeyError)

MINIMAL = """
[dataset]
kind = "two-gaussians"

[model]
arch = "mlp"

[train]
mode = "dense"
"""


def test_minimal_config_defaults():
    cfg = parse_config_text(MINIMAL)
    assert cfg.seed == 0
    assert cfg.precision == 32
    assert cfg.train_cfg.epochs == 20
    assert cfg.train_cfg.lr == 0.1
    assert cfg.train_cfg.momentum == 0.9
    assert cfg.model["hidden"] == [64, 64]
    assert cfg.train_cfg.target is None
    assert cfg.train_cfg.objective is None


def test_fixed_mode_without_target_names_key():
    text = MINIMAL.replace('mode = "dense"', 'mode = "fixed_ga"')
    with pytest.raises(InconsistentConfigError, match="target.s"):
        parse_config_text(text)


def test_unknown_key_named():
    # MINIMAL ends inside [train], so the key lands there
    with pytest.raises(UnknownKeyError, match="train.lr_warmup"):
        parse_config_text(MINIMAL + "lr_warmup = 3\n")


def test_unknown_section_named():
    with pytest.raises(UnknownKeyError, match=r"\[tuning\]"):
        parse_config_text(MINIMAL + "\n[tuning]\nx = 1\n")


def test_syntax_error_carries_location():
    with pytest.raises(ConfigSyntaxError, match="line"):
        parse_config_text("[dataset\nkind = 2")


def test_type_mismatch():
    bad = MINIMAL.replace('mode = "dense"', "mode = 17")
    with pytest.raises(InconsistentConfigError, match="train.mode"):
        parse_config_text(bad)


BUDGET = """
[experiment]
seed = 11

[dataset]
kind = "synth-images"

[model]
arch = "cnn-small"
widths = [16, 32]
exempt = ["classifier"]

[train]
mode = "adaptive"
epochs = 5

[objective]
variant = "budget_quadratic"
lambda_p = 20.0
budget_p = 0.15
"""


def test_budget_config_round_trips_through_echo(tmp_path):
    cfg = parse_config_text(BUDGET)
    assert cfg.train_cfg.objective.budget_p == 0.15
    assert cfg.train_cfg.exempt_layers == ("classifier",)
    echo_path = tmp_path / "echo.toml"
    echo_config(cfg, str(echo_path))
    cfg2 = parse_config(str(echo_path))
    assert cfg2.raw == cfg.raw
    assert cfg2.train_cfg.objective.budget_p == 0.15
    assert cfg2.train_cfg == cfg.train_cfg


def test_budget_variant_requires_budget():
    text = BUDGET.replace("budget_p = 0.15", "")
    with pytest.raises(InconsistentConfigError, match="budget"):
        parse_config_text(text)


def test_invalid_objective_value_is_config_error():
    text = BUDGET.replace("budget_p = 0.15", "budget_p = 1.5")
    with pytest.raises(InconsistentConfigError):
        parse_config_text(text)


def test_dumps_config_formats_values():
    out = dumps_config({"train": {"lr": 0.1, "ste": True, "mode": "dense",
                                  "hidden": [1, 2], "skip": None}})
    assert 'lr = 0.1' in out
    assert 'ste = true' in out
    assert 'mode = "dense"' in out
    assert 'hidden = [1, 2]' in out
    assert 'skip' not in out


def test_wrn_arch_parsing():
    text = MINIMAL.replace('arch = "mlp"', 'arch = "wrn-16-2"')
    cfg = parse_config_text(text)
    assert cfg.model["arch"] == "wrn-16-2"
    bad = MINIMAL.replace('arch = "mlp"', 'arch = "wrn-sixteen-2"')
    from prunekit.config import build_model_spec
    from prunekit.data import two_gaussians

    with pytest.raises(InconsistentConfigError, match="wrn"):
        build_model_spec(parse_config_text(bad), two_gaussians(100, 50, 0))
