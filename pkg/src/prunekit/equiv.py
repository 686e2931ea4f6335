"""Dense-equivalent baselines and error-vs-budget trade-off curves.

A pruned model with compression ratio r_c (kept fraction of parameters) is
compared against a thinner dense network of the same depth whose channel
counts are scaled as floor(sqrt(r_c) * C), so its parameter budget matches
the pruned model up to floor slack. The stem's input channels (image
channels) and the class count are fixed by the task and are never scaled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

from .errors import ContractError
from .nn import NetworkSpec, build_network
import numpy as np


@dataclass
class EquivSpec:
    """Channel map from a base network to its thinner equivalent."""

    base: NetworkSpec
    compression_ratio: float
    channel_map: Dict[str, Tuple[int, int]] = field(default_factory=dict)
    spec: NetworkSpec = None


def _scale_channels(value: int, factor: float, what: str) -> int:
    scaled = math.floor(factor * value)
    if scaled < 1:
        raise ContractError(
            f"compression ratio too small: {what} would drop from {value} to 0 channels")
    return scaled


def dense_equivalent(base: NetworkSpec, r_c: float) -> NetworkSpec:
    """Thinner version of ``base`` whose parameter budget is roughly
    r_c times the base budget (exact up to channel flooring and the
    unscaled stem input / classifier output / batchnorm terms)."""
    if not 0.0 < r_c <= 1.0:
        raise ContractError(f"compression ratio must lie in (0,1], got {r_c}")
    factor = math.sqrt(r_c)
    s = dict(base.structure)
    if base.family == "mlp":
        s["hidden"] = [_scale_channels(h, factor, f"hidden[{i}]")
                       for i, h in enumerate(s["hidden"])]
    elif base.family == "cnn-small":
        s["widths"] = [_scale_channels(w, factor, f"widths[{i}]")
                       for i, w in enumerate(s["widths"])]
    elif base.family == "wrn":
        s["stem"] = _scale_channels(s["stem"], factor, "stem")
        s["widths"] = [_scale_channels(w, factor, f"widths[{i}]")
                       for i, w in enumerate(s["widths"])]
    else:
        raise ContractError(f"unknown network family {base.family!r}")
    # param counts come from a throwaway instantiation of the scaled recipe
    net = build_network(NetworkSpec(base.family, s, base.input_shape,
                                    base.classes), np.random.default_rng(0))
    return net.to_spec()


def equivalence_map(base: NetworkSpec, r_c: float) -> EquivSpec:
    """dense_equivalent plus the per-layer (C'_in, C'_out) mapping."""
    scaled = dense_equivalent(base, r_c)
    cmap = {}
    scaled_by_name = {l.name: l for l in scaled.layers}
    for layer in base.layers:
        if layer.kind in ("conv2d", "linear"):
            sl = scaled_by_name[layer.name]
            cmap[layer.name] = (sl.c_in, sl.c_out)
    return EquivSpec(base=base, compression_ratio=r_c, channel_map=cmap,
                     spec=scaled)


@dataclass
class TradeoffRow:
    ratio: float
    mode: str
    params: int
    error: float
    sparsity: float


def tradeoff_curve(base: NetworkSpec, ratios: Sequence[float], cfg, dataset,
                   modes: Sequence[str] = ("fixed_bs",)) -> List[TradeoffRow]:
    """Train the dense equivalent and every requested pruning mode at each
    ratio; one row per (ratio, mode) plus a dense-equivalent row per ratio.

    A failed row is recorded with error = nan and the sweep continues.
    """
    from . import train as _train  # deferred: train imports equiv users

    rows: List[TradeoffRow] = []
    for ratio in ratios:
        jobs = [("dense-equiv", None)] + [(m, m) for m in modes]
        for label, mode in jobs:
            try:
                if mode is None:
                    spec = dense_equivalent(base, ratio)
                    run_cfg = cfg.replace(mode="dense")
                else:
                    spec = base
                    if mode.startswith("fixed"):
                        run_cfg = cfg.replace(mode=mode, target_s=1.0 - ratio)
                    else:
                        run_cfg = cfg.replace(mode="adaptive", budget_p=ratio)
                result = _train.run_experiment(run_cfg, dataset, spec=spec)
                if mode is not None:
                    rep = result.report
                    params = spec.total_params - (rep.dense_params - rep.kept_params)
                    sparsity = rep.overall_param_sparsity
                else:
                    params = spec.total_params
                    sparsity = 0.0
                rows.append(TradeoffRow(ratio=ratio, mode=label, params=params,
                                        error=1.0 - result.test_accuracy,
                                        sparsity=sparsity))
            except Exception as exc:  # keep remaining rows alive
                rows.append(TradeoffRow(ratio=ratio, mode=label, params=0,
                                        error=float("nan"), sparsity=0.0))
                import warnings
                warnings.warn(f"trade-off row (ratio={ratio}, mode={label}) "
                              f"failed: {exc}", RuntimeWarning)
    return rows
