"""Experiment configuration: parse, validate, default, echo.

Configs are TOML with a fixed nested schema. Unknown keys are rejected by
their dotted name, syntax errors carry line/column from the parser, and
mode/parameter inconsistencies (e.g. a fixed mode without a target) raise
a distinct error class. The fully-defaulted config is echoed into the run
directory and is itself a valid config reproducing the run.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

if sys.version_info >= (3, 11):
    import tomllib as _toml
else:
    import tomli as _toml

import numpy as np

from .errors import (ConfigSyntaxError, ContractError, InconsistentConfigError,
                     UnknownKeyError)
from .prune import SparsityTarget
from .sparsity import SparsityObjective
from .train import TrainConfig

# section -> key -> (python types accepted, default); None default = optional
_SCHEMA: Dict[str, Dict[str, tuple]] = {
    "experiment": {
        "seed": ((int,), 0),
        "precision": ((int,), 32),
        "out_dir": ((str,), "runs/exp"),
    },
    "dataset": {
        "kind": ((str,), None),  # required
        "path": ((str,), ""),
        "n_train": ((int,), 2000),
        "n_test": ((int,), 500),
        "noise": ((float, int), None),
        "separation": ((float, int), None),
        "classes": ((int,), None),
        "image_size": ((int,), None),
        "channels": ((int,), None),
        "teacher_widths": ((list,), None),
    },
    "model": {
        "arch": ((str,), None),  # required
        "hidden": ((list,), [64, 64]),
        "widths": ((list,), [16, 32]),
        "prune_classifier": ((bool,), True),
        "exempt": ((list,), []),
    },
    "train": {
        "mode": ((str,), None),  # required
        "epochs": ((int,), 20),
        "batch_size": ((int,), 64),
        "lr": ((float, int), 0.1),
        "lr_min": ((float, int), 0.0),
        "momentum": ((float, int), 0.9),
        "weight_decay": ((float, int), 1e-4),
        "restart_period": ((int,), 0),
        "log_interval": ((int,), 50),
        "ste": ((bool,), True),
        "bound_refresh": ((int,), 1),
        "init_sparsity": ((float, int), 0.05),
        "checkpoint_every": ((int,), 0),
    },
    "target": {
        "s": ((float, int), None),
        "epsilon": ((float, int), 1e-3),
        "max_iters": ((int,), 50),
    },
    "objective": {
        "variant": ((str,), "avg"),
        "lambda": ((float, int), 1.0),
        "lambda_p": ((float, int), 10.0),
        "lambda_f": ((float, int), 10.0),
        "budget_p": ((float, int), None),
        "budget_f": ((float, int), None),
        "resource": ((str,), "params"),
    },
}

_REQUIRED = (("dataset", "kind"), ("model", "arch"), ("train", "mode"))


@dataclass
class ExperimentConfig:
    seed: int
    precision: int
    out_dir: str
    dataset: Dict[str, Any]
    model: Dict[str, Any]
    train_cfg: TrainConfig
    raw: Dict[str, Dict[str, Any]] = field(default_factory=dict)


def _validate_tree(tree: Dict[str, Any]) -> Dict[str, Dict[str, Any]]:
    filled: Dict[str, Dict[str, Any]] = {}
    for section in tree:
        if section not in _SCHEMA:
            raise UnknownKeyError(f"unknown config section [{section}]")
        if not isinstance(tree[section], dict):
            raise UnknownKeyError(f"[{section}] must be a table")
    for section, keys in _SCHEMA.items():
        given = tree.get(section, {})
        for key in given:
            if key not in keys:
                raise UnknownKeyError(f"unknown config key {section}.{key}")
        out: Dict[str, Any] = {}
        for key, (types, default) in keys.items():
            if key in given:
                val = given[key]
                if not isinstance(val, types) or isinstance(val, bool) and bool not in types:
                    names = "/".join(t.__name__ for t in types)
                    raise InconsistentConfigError(
                        f"{section}.{key} must be {names}, got {type(val).__name__}")
                if float in types and isinstance(val, int):
                    val = float(val)
                out[key] = val
            elif default is not None:
                out[key] = default
        filled[section] = out
    for section, key in _REQUIRED:
        if key not in filled[section]:
            raise InconsistentConfigError(f"missing required key {section}.{key}")
    return filled


def _build_train_cfg(filled: Dict[str, Dict[str, Any]]) -> TrainConfig:
    tr = filled["train"]
    mode = tr["mode"]
    target = None
    objective = None
    try:
        if mode in ("fixed_bs", "fixed_ga"):
            if "s" not in filled["target"]:
                raise InconsistentConfigError(
                    f"mode {mode} requires target.s")
            tgt = filled["target"]
            target = SparsityTarget(s=tgt["s"], epsilon=tgt["epsilon"],
                                    max_iters=tgt["max_iters"])
        elif mode == "adaptive":
            ob = filled["objective"]
            if ob["variant"].startswith("budget") and "budget_p" not in ob \
                    and "budget_f" not in ob:
                raise InconsistentConfigError(
                    "budget objectives require objective.budget_p or objective.budget_f")
            objective = SparsityObjective(
                variant=ob["variant"], lam=ob["lambda"],
                lambda_p=ob["lambda_p"], lambda_f=ob["lambda_f"],
                budget_p=ob.get("budget_p"), budget_f=ob.get("budget_f"),
                resource=ob["resource"])
        return TrainConfig(
            mode=mode, epochs=tr["epochs"], batch_size=tr["batch_size"],
            lr=tr["lr"], lr_min=tr["lr_min"], momentum=tr["momentum"],
            weight_decay=tr["weight_decay"], restart_period=tr["restart_period"],
            seed=filled["experiment"]["seed"],
            precision=filled["experiment"]["precision"],
            ste=tr["ste"], bound_refresh=tr["bound_refresh"],
            log_interval=tr["log_interval"], init_sparsity=tr["init_sparsity"],
            target=target, objective=objective,
            exempt_layers=tuple(filled["model"]["exempt"]),
            checkpoint_every=tr["checkpoint_every"])
    except ContractError as exc:
        raise InconsistentConfigError(str(exc)) from exc


def parse_config_text(text: str) -> ExperimentConfig:
    try:
        tree = _toml.loads(text)
    except _toml.TOMLDecodeError as exc:
        raise ConfigSyntaxError(f"config syntax error: {exc}") from exc
    filled = _validate_tree(tree)
    cfg = ExperimentConfig(
        seed=filled["experiment"]["seed"],
        precision=filled["experiment"]["precision"],
        out_dir=filled["experiment"]["out_dir"],
        dataset=filled["dataset"],
        model=filled["model"],
        train_cfg=_build_train_cfg(filled),
        raw=filled)
    return cfg


def parse_config(path: str) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


# --------------------------------------------------------------------------
# echo


def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt_value(x) for x in v) + "]"
    raise ContractError(f"cannot serialize config value {v!r}")


def dumps_config(raw: Dict[str, Dict[str, Any]]) -> str:
    lines = []
    for section, table in raw.items():
        if not table:
            continue
        lines.append(f"[{section}]")
        for key, val in table.items():
            if val is None:
                continue
            lines.append(f"{key} = {_fmt_value(val)}")
        lines.append("")
    return "\n".join(lines)


def echo_config(cfg: ExperimentConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_config(cfg.raw))


# --------------------------------------------------------------------------
# construction helpers shared by CLI and tests


def build_dataset(cfg: ExperimentConfig):
    from .data import ingest_dataset

    ds = dict(cfg.dataset)
    kind = ds.pop("kind")
    path = ds.pop("path", "") or None
    kw = {}
    passthrough = {
        "two-gaussians": ("n_train", "n_test", "noise", "separation"),
        "rings": ("n_train", "n_test", "noise"),
        "synth-images": ("n_train", "n_test", "classes", "image_size",
                         "channels", "teacher_widths"),
        "image-dir": (),
    }
    for key in passthrough.get(kind, ()):
        if ds.get(key) is not None:
            val = ds[key]
            kw[key] = tuple(val) if key == "teacher_widths" else val
    return ingest_dataset(kind, seed=cfg.seed, path=path, **kw)


def build_model_spec(cfg: ExperimentConfig, dataset):
    """NetworkSpec for the configured architecture on the given dataset."""
    from .nn import build_cnn_small, build_mlp, build_wrn

    rng = np.random.default_rng(0)  # throwaway weights: spec only
    arch = cfg.model["arch"]
    prune_cls = cfg.model["prune_classifier"]
    if arch == "mlp":
        if len(dataset.input_shape) != 1:
            raise InconsistentConfigError(
                f"mlp expects flat inputs, dataset has shape {dataset.input_shape}")
        net = build_mlp(dataset.input_shape[0], cfg.model["hidden"],
                        dataset.classes, rng, prune_classifier=prune_cls)
    elif arch == "cnn-small":
        if len(dataset.input_shape) != 3:
            raise InconsistentConfigError(
                f"cnn-small expects image inputs, dataset has shape {dataset.input_shape}")
        net = build_cnn_small(dataset.input_shape, cfg.model["widths"],
                              dataset.classes, rng, prune_classifier=prune_cls)
    elif arch.startswith("wrn-"):
        parts = arch.split("-")
        if len(parts) != 3 or not parts[1].isdigit() or not parts[2].isdigit():
            raise InconsistentConfigError(
                f"wrn arch must look like 'wrn-16-8', got {arch!r}")
        if len(dataset.input_shape) != 3:
            raise InconsistentConfigError(
                f"wrn expects image inputs, dataset has shape {dataset.input_shape}")
        net = build_wrn(int(parts[1]), int(parts[2]), dataset.classes, rng,
                        in_shape=dataset.input_shape)
    else:
        raise InconsistentConfigError(f"unknown model.arch {arch!r}")
    return net.to_spec()
