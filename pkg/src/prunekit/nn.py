"""Prunable layers, network assembly, architecture builders, accounting.

Parameter counts are those of the dense model and never change with
pruning state; kept counts scale linearly with per-layer density. FLOPs
for a conv are 2 * C_in * C_out * H_out * W_out * k^2 (multiply-adds of
the sliding window), 2 * fan_in * fan_out for a linear layer, and zero
for batchnorm / activations / pooling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .dtypes import default_dtype
from .errors import ContractError, DimensionError
from .prune import PrunableParam, hard_shrink, masked_prune_forward, ste_prune_forward
from .tensor import Tensor

PRUNE_OFF = "off"
PRUNE_STE = "ste"
PRUNE_MASKED = "masked"


# ---------------------------------------------------------------------------
# layer specs and accounting


@dataclass
class LayerSpec:
    name: str
    kind: str  # linear | conv2d | batchnorm | activation | pool
    prunable: bool = False
    has_bias: bool = False
    c_in: int = 0
    c_out: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    h_out: int = 0
    w_out: int = 0
    param_count: int = 0
    weight_count: int = 0  # prunable weights only (no bias)
    flop_count: int = 0


@dataclass
class NetworkSpec:
    family: str
    structure: dict
    input_shape: tuple
    classes: int
    layers: List[LayerSpec] = field(default_factory=list)

    def prunable_layers(self) -> List[LayerSpec]:
        return [l for l in self.layers if l.prunable]

    @property
    def total_params(self) -> int:
        return sum(l.param_count for l in self.layers)

    @property
    def total_flops(self) -> int:
        return sum(l.flop_count for l in self.layers)


def count_params(spec: NetworkSpec) -> int:
    return spec.total_params


def count_flops(spec: NetworkSpec) -> int:
    return spec.total_flops


@dataclass
class LayerReport:
    name: str
    weight_count: int
    sparsity: float
    kept_params: int
    kept_flops: int
    flop_count: int


@dataclass
class SparsityReport:
    rows: List[LayerReport]
    overall_param_sparsity: float
    overall_flop_sparsity: float
    dense_params: int
    dense_flops: int
    kept_params: int
    kept_flops: int


# ---------------------------------------------------------------------------
# modules


class Module:
    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def named_params(self, prefix: str = "") -> List[Tuple[str, Tensor]]:
        return []

    def named_buffers(self, prefix: str = "") -> List[Tuple[str, np.ndarray]]:
        return []

    def prunables(self, prefix: str = "") -> List[Tuple[str, PrunableParam]]:
        return []

    def set_training(self, flag: bool) -> None:
        pass

    def describe(self, prefix: str, hw) -> Tuple[List[LayerSpec], object]:
        raise NotImplementedError


def _kaiming_normal(rng: np.random.Generator, shape, fan_in: int):
    std = math.sqrt(2.0 / fan_in)
    return rng.normal(0.0, std, size=shape).astype(default_dtype())


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator,
                 bias: bool = True, prunable: bool = True,
                 mean_mode: str = "assume-zero"):
        self.fan_in, self.fan_out = fan_in, fan_out
        w = Tensor(_kaiming_normal(rng, (fan_in, fan_out), fan_in), requires_grad=True)
        self.param = PrunableParam.wrap(w, mean_mode=mean_mode)
        self.bias = Tensor(np.zeros(fan_out, dtype=default_dtype()),
                           requires_grad=True) if bias else None
        self.prunable = prunable
        self.prune_mode = PRUNE_OFF

    def effective_weight(self) -> Tensor:
        if self.prunable and self.prune_mode == PRUNE_STE:
            return ste_prune_forward(self.param)
        if self.prunable and self.prune_mode == PRUNE_MASKED:
            return masked_prune_forward(self.param)
        return self.param.weights

    def forward(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.effective_weight())
        if self.bias is not None:
            y = T.add(y, self.bias)
        return y

    def named_params(self, prefix=""):
        out = [(prefix + "weight", self.param.weights)]
        if self.bias is not None:
            out.append((prefix + "bias", self.bias))
        out.append((prefix + "bound", self.param.bound))
        return out

    def prunables(self, prefix=""):
        return [(prefix.rstrip("."), self.param)] if self.prunable else []

    def describe(self, prefix, hw):
        wc = self.fan_in * self.fan_out
        spec = LayerSpec(
            name=prefix.rstrip("."), kind="linear", prunable=self.prunable,
            has_bias=self.bias is not None, c_in=self.fan_in, c_out=self.fan_out,
            param_count=wc + (self.fan_out if self.bias is not None else 0),
            weight_count=wc, flop_count=2 * wc)
        return [spec], None


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, bias: bool = True,
                 prunable: bool = True, mean_mode: str = "assume-zero"):
        self.c_in, self.c_out = c_in, c_out
        self.kernel, self.stride, self.padding = kernel, stride, padding
        fan_in = c_in * kernel * kernel
        w = Tensor(_kaiming_normal(rng, (c_out, c_in, kernel, kernel), fan_in),
                   requires_grad=True)
        self.param = PrunableParam.wrap(w, mean_mode=mean_mode)
        self.bias = Tensor(np.zeros(c_out, dtype=default_dtype()),
                           requires_grad=True) if bias else None
        self.prunable = prunable
        self.prune_mode = PRUNE_OFF

    def effective_weight(self) -> Tensor:
        if self.prunable and self.prune_mode == PRUNE_STE:
            return ste_prune_forward(self.param)
        if self.prunable and self.prune_mode == PRUNE_MASKED:
            return masked_prune_forward(self.param)
        return self.param.weights

    def forward(self, x: Tensor) -> Tensor:
        y = T.conv2d(x, self.effective_weight(), stride=self.stride,
                     padding=self.padding)
        if self.bias is not None:
            y = T.add(y, T.reshape(self.bias, (self.c_out, 1, 1)))
        return y

    def named_params(self, prefix=""):
        out = [(prefix + "weight", self.param.weights)]
        if self.bias is not None:
            out.append((prefix + "bias", self.bias))
        out.append((prefix + "bound", self.param.bound))
        return out

    def prunables(self, prefix=""):
        return [(prefix.rstrip("."), self.param)] if self.prunable else []

    def describe(self, prefix, hw):
        h, w = hw
        ho = (h + 2 * self.padding - self.kernel) // self.stride + 1
        wo = (w + 2 * self.padding - self.kernel) // self.stride + 1
        if ho <= 0 or wo <= 0:
            raise DimensionError(f"{prefix}: empty output for input {h}x{w}")
        wc = self.c_in * self.c_out * self.kernel * self.kernel
        spec = LayerSpec(
            name=prefix.rstrip("."), kind="conv2d", prunable=self.prunable,
            has_bias=self.bias is not None, c_in=self.c_in, c_out=self.c_out,
            kernel=self.kernel, stride=self.stride, padding=self.padding,
            h_out=ho, w_out=wo,
            param_count=wc + (self.c_out if self.bias is not None else 0),
            weight_count=wc, flop_count=2 * wc * ho * wo)
        return [spec], (ho, wo)


class BatchNorm2d(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        self.channels = channels
        self.eps, self.momentum = eps, momentum
        dt = default_dtype()
        self.gamma = Tensor(np.ones(channels, dtype=dt), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dt), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dt)
        self.running_var = np.ones(channels, dtype=dt)
        self.training = True

    def set_training(self, flag: bool) -> None:
        self.training = flag

    def forward(self, x: Tensor) -> Tensor:
        g = T.reshape(self.gamma, (self.channels, 1, 1))
        b = T.reshape(self.beta, (self.channels, 1, 1))
        if self.training:
            mu = T.tmean(x, axis=(0, 2, 3), keepdims=True)
            xc = T.add(x, T.neg(mu))
            var = T.tmean(T.mul(xc, xc), axis=(0, 2, 3), keepdims=True)
            inv = T.pow_const(T.add_const(var, self.eps), -0.5)
            m = self.momentum
            self.running_mean = ((1 - m) * self.running_mean
                                 + m * mu.data.reshape(-1)).astype(self.running_mean.dtype)
            self.running_var = ((1 - m) * self.running_var
                                + m * var.data.reshape(-1)).astype(self.running_var.dtype)
            xhat = T.mul(xc, inv)
        else:
            mu = Tensor(self.running_mean.reshape(1, -1, 1, 1))
            inv = Tensor((self.running_var.reshape(1, -1, 1, 1) + self.eps) ** -0.5)
            xhat = T.mul(T.add(x, T.neg(mu)), inv)
        return T.add(T.mul(xhat, g), b)

    def named_params(self, prefix=""):
        return [(prefix + "gamma", self.gamma), (prefix + "beta", self.beta)]

    def named_buffers(self, prefix=""):
        return [(prefix + "running_mean", self.running_mean),
                (prefix + "running_var", self.running_var)]

    def describe(self, prefix, hw):
        spec = LayerSpec(name=prefix.rstrip("."), kind="batchnorm",
                         c_in=self.channels, c_out=self.channels,
                         param_count=2 * self.channels)
        return [spec], hw


class ReLU(Module):
    def forward(self, x: Tensor) -> Tensor:
        return T.relu(x)

    def describe(self, prefix, hw):
        return [LayerSpec(name=prefix.rstrip("."), kind="activation")], hw


class AvgPool2d(Module):
    def __init__(self, window: int = 2):
        self.window = window

    def forward(self, x: Tensor) -> Tensor:
        b, c, h, w = x.shape
        k = self.window
        if h % k or w % k:
            raise DimensionError(f"avgpool window {k} does not divide {h}x{w}")
        y = T.reshape(x, (b, c, h // k, k, w // k, k))
        return T.tmean(y, axis=(3, 5))

    def describe(self, prefix, hw):
        h, w = hw
        return [LayerSpec(name=prefix.rstrip("."), kind="pool")], (h // self.window,
                                                                   w // self.window)


class GlobalAvgPool(Module):
    def forward(self, x: Tensor) -> Tensor:
        return T.tmean(x, axis=(2, 3))

    def describe(self, prefix, hw):
        return [LayerSpec(name=prefix.rstrip("."), kind="pool")], None


class Flatten(Module):
    def forward(self, x: Tensor) -> Tensor:
        return T.flatten(x)

    def describe(self, prefix, hw):
        return [], hw


class PreactBlock(Module):
    """Pre-activation residual block: BN-ReLU-conv-BN-ReLU-conv plus a 1x1
    projection shortcut whenever shape changes."""

    def __init__(self, c_in: int, c_out: int, stride: int, rng, bias: bool = True):
        self.bn1 = BatchNorm2d(c_in)
        self.conv1 = Conv2d(c_in, c_out, 3, rng, stride=stride, padding=1, bias=bias)
        self.bn2 = BatchNorm2d(c_out)
        self.conv2 = Conv2d(c_out, c_out, 3, rng, stride=1, padding=1, bias=bias)
        self.shortcut = None
        if c_in != c_out or stride != 1:
            self.shortcut = Conv2d(c_in, c_out, 1, rng, stride=stride, padding=0,
                                   bias=bias)

    def forward(self, x: Tensor) -> Tensor:
        h = T.relu(self.bn1.forward(x))
        out = self.conv1.forward(h)
        out = self.conv2.forward(T.relu(self.bn2.forward(out)))
        sc = self.shortcut.forward(h) if self.shortcut is not None else x
        return T.add(out, sc)

    def _children(self):
        kids = [("bn1", self.bn1), ("conv1", self.conv1),
                ("bn2", self.bn2), ("conv2", self.conv2)]
        if self.shortcut is not None:
            kids.append(("shortcut", self.shortcut))
        return kids

    def named_params(self, prefix=""):
        out = []
        for name, child in self._children():
            out.extend(child.named_params(prefix + name + "."))
        return out

    def named_buffers(self, prefix=""):
        out = []
        for name, child in self._children():
            out.extend(child.named_buffers(prefix + name + "."))
        return out

    def prunables(self, prefix=""):
        out = []
        for name, child in self._children():
            out.extend(child.prunables(prefix + name + "."))
        return out

    def set_training(self, flag):
        for _, child in self._children():
            child.set_training(flag)

    def describe(self, prefix, hw):
        rows, hw1 = self.bn1.describe(prefix + "bn1", hw)
        r, hw1 = self.conv1.describe(prefix + "conv1", hw)
        rows += r
        r, _ = self.bn2.describe(prefix + "bn2", hw1)
        rows += r
        r, hw2 = self.conv2.describe(prefix + "conv2", hw1)
        rows += r
        if self.shortcut is not None:
            r, _ = self.shortcut.describe(prefix + "shortcut", hw)
            rows += r
        return rows, hw2


# ---------------------------------------------------------------------------
# network


class Network(Module):
    def __init__(self, modules: Sequence[Tuple[str, Module]], family: str,
                 structure: dict, input_shape, classes: int):
        self.modules = list(modules)
        self.family = family
        self.structure = structure
        self.input_shape = tuple(input_shape)
        self.classes = classes

    def forward(self, x: Tensor) -> Tensor:
        for _, m in self.modules:
            x = m.forward(x)
        return x

    def named_params(self, prefix=""):
        out = []
        for name, m in self.modules:
            out.extend(m.named_params(prefix + name + "."))
        return out

    def named_buffers(self, prefix=""):
        out = []
        for name, m in self.modules:
            out.extend(m.named_buffers(prefix + name + "."))
        return out

    def prunables(self, prefix="") -> List[Tuple[str, PrunableParam]]:
        out = []
        for name, m in self.modules:
            out.extend(m.prunables(prefix + name + "."))
        return out

    def set_training(self, flag: bool) -> None:
        for _, m in self.modules:
            m.set_training(flag)

    def set_pruning(self, mode: str, exempt: Sequence[str] = ()) -> None:
        """Switch pruning routing on every prunable layer.

        ``exempt`` names layers (by prunable name) that stay unpruned.
        """
        if mode not in (PRUNE_OFF, PRUNE_STE, PRUNE_MASKED):
            raise ContractError(f"unknown prune mode {mode!r}")
        names = {n for n, _ in self.prunables()}
        for e in exempt:
            if e not in names:
                raise ContractError(f"exempt layer {e!r} is not a prunable layer")

        def visit(m, prefix):
            if isinstance(m, (Linear, Conv2d)):
                full = prefix.rstrip(".")
                if m.prunable:
                    m.prune_mode = PRUNE_OFF if full in exempt else mode
            elif isinstance(m, PreactBlock):
                for name, child in m._children():
                    visit(child, prefix + name + ".")

        for name, m in self.modules:
            visit(m, name + ".")

    def mark_unprunable(self, names: Sequence[str]) -> None:
        """Permanently drop layers from the prunable set (routing, loss
        contributions and sparsity accounting all follow)."""
        known = {n for n, _ in self.prunables()}
        for e in names:
            if e not in known:
                raise ContractError(f"exempt layer {e!r} is not a prunable layer")

        def visit(m, prefix):
            if isinstance(m, (Linear, Conv2d)):
                if prefix.rstrip(".") in names:
                    m.prunable = False
                    m.prune_mode = PRUNE_OFF
            elif isinstance(m, PreactBlock):
                for name, child in m._children():
                    visit(child, prefix + name + ".")

        for name, m in self.modules:
            visit(m, name + ".")

    def parameter_groups(self) -> Dict[str, List[Tensor]]:
        """weights (decayed), aux (biases/BN, undecayed), bounds (undecayed)."""
        groups = {"weights": [], "aux": [], "bounds": []}
        for name, p in self.named_params():
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "weight":
                groups["weights"].append(p)
            elif leaf == "bound":
                groups["bounds"].append(p)
            else:
                groups["aux"].append(p)
        return groups

    def to_spec(self) -> NetworkSpec:
        spec = NetworkSpec(family=self.family, structure=dict(self.structure),
                           input_shape=self.input_shape, classes=self.classes)
        hw = self.input_shape[1:] if len(self.input_shape) == 3 else None
        for name, m in self.modules:
            rows, hw = m.describe(name + ".", hw)
            spec.layers.extend(rows)
        return spec


def attained_sparsity(net: Network) -> SparsityReport:
    """Exact zero-counts of each layer's pruned weight tensor, with the
    pruning state refreshed from the live weights and bounds."""
    spec = net.to_spec()
    by_name = {l.name: l for l in spec.layers}
    rows = []
    total_w = total_kept = 0
    total_f = total_fkept = 0.0
    for name, p in net.prunables():
        lspec = by_name[name]
        sigma = p.refresh_sigma()
        threshold = float(p.bound.data) * sigma
        pruned = hard_shrink(p.weights.data, threshold)
        zeros = int(np.count_nonzero(pruned == 0.0))
        s_i = zeros / pruned.size
        kept_params = int(round((1.0 - s_i) * lspec.weight_count))
        kept_flops = int(round((1.0 - s_i) * lspec.flop_count))
        rows.append(LayerReport(name=name, weight_count=lspec.weight_count,
                                sparsity=s_i, kept_params=kept_params,
                                kept_flops=kept_flops, flop_count=lspec.flop_count))
        total_w += lspec.weight_count
        total_kept += kept_params
        total_f += lspec.flop_count
        total_fkept += kept_flops
    if total_w == 0:
        raise ContractError("network has no prunable layers to report on")
    return SparsityReport(
        rows=rows,
        overall_param_sparsity=1.0 - total_kept / total_w,
        overall_flop_sparsity=1.0 - (total_fkept / total_f if total_f else 0.0),
        dense_params=total_w, dense_flops=int(total_f),
        kept_params=total_kept, kept_flops=int(total_fkept))


# ---------------------------------------------------------------------------
# builders


def build_mlp(in_dim: int, hidden: Sequence[int], classes: int,
              rng: np.random.Generator, bias: bool = True,
              prune_classifier: bool = True) -> Network:
    mods: List[Tuple[str, Module]] = []
    prev = in_dim
    for i, h in enumerate(hidden):
        if h < 1:
            raise ContractError(f"hidden layer {i} has non-positive width {h}")
        mods.append((f"fc{i + 1}", Linear(prev, h, rng, bias=bias)))
        mods.append((f"act{i + 1}", ReLU()))
        prev = h
    mods.append(("classifier", Linear(prev, classes, rng, bias=bias,
                                      prunable=prune_classifier)))
    structure = {"in_dim": in_dim, "hidden": list(hidden), "classes": classes,
                 "bias": bias, "prune_classifier": prune_classifier}
    return Network(mods, "mlp", structure, (in_dim,), classes)


def build_cnn_small(in_shape: Sequence[int], widths: Sequence[int], classes: int,
                    rng: np.random.Generator,
                    prune_classifier: bool = True) -> Network:
    c, h, w = in_shape
    w1, w2 = widths
    if w1 < 1 or w2 < 1:
        raise ContractError(f"conv widths must be positive, got {widths}")
    mods: List[Tuple[str, Module]] = [
        ("conv1", Conv2d(c, w1, 3, rng, stride=1, padding=1)),
        ("act1", ReLU()),
        ("pool1", AvgPool2d(2)),
        ("conv2", Conv2d(w1, w2, 3, rng, stride=1, padding=1)),
        ("act2", ReLU()),
        ("pool2", AvgPool2d(2)),
        ("flatten", Flatten()),
    ]
    feat = w2 * (h // 4) * (w // 4)
    mods.append(("classifier", Linear(feat, classes, rng,
                                      prunable=prune_classifier)))
    structure = {"in_shape": list(in_shape), "widths": [w1, w2],
                 "classes": classes, "prune_classifier": prune_classifier}
    return Network(mods, "cnn-small", structure, tuple(in_shape), classes)


def build_wrn_widths(stem: int, widths: Sequence[int], blocks_per_group: int,
                     classes: int, rng: np.random.Generator,
                     in_shape: Sequence[int] = (3, 32, 32),
                     prune_classifier: bool = True) -> Network:
    if stem < 1 or any(w < 1 for w in widths):
        raise ContractError(f"channel widths must be positive: stem={stem}, {widths}")
    c_img = in_shape[0]
    mods: List[Tuple[str, Module]] = [
        ("stem", Conv2d(c_img, stem, 3, rng, stride=1, padding=1)),
    ]
    c_in = stem
    for g, w in enumerate(widths):
        stride = 1 if g == 0 else 2
        for b in range(blocks_per_group):
            mods.append((f"g{g + 1}.b{b}",
                         PreactBlock(c_in, w, stride if b == 0 else 1, rng)))
            c_in = w
    mods.extend([
        ("final_bn", BatchNorm2d(c_in)),
        ("final_act", ReLU()),
        ("gap", GlobalAvgPool()),
        ("classifier", Linear(c_in, classes, rng, prunable=prune_classifier)),
    ])
    structure = {"stem": stem, "widths": list(widths),
                 "blocks_per_group": blocks_per_group, "classes": classes,
                 "in_shape": list(in_shape), "prune_classifier": prune_classifier}
    return Network(mods, "wrn", structure, tuple(in_shape), classes)


def build_wrn(depth: int, width_multiplier: int, classes: int,
              rng: Optional[np.random.Generator] = None,
              in_shape: Sequence[int] = (3, 32, 32)) -> Network:
    """Wide residual network: 3 groups of (depth-4)/6 pre-activation blocks
    with widths 16k / 32k / 64k over a 16-channel stem."""
    if (depth - 4) % 6 != 0 or depth < 10:
        raise ContractError(f"wrn depth must satisfy (depth-4) % 6 == 0, got {depth}")
    if width_multiplier < 1:
        raise ContractError(f"width multiplier must be >= 1, got {width_multiplier}")
    n = (depth - 4) // 6
    k = width_multiplier
    rng = rng if rng is not None else np.random.default_rng(0)
    return build_wrn_widths(16, [16 * k, 32 * k, 64 * k], n, classes, rng,
                            in_shape=in_shape)


def build_network(spec: NetworkSpec, rng: np.random.Generator) -> Network:
    """Instantiate a runtime network from a structural spec (used to train
    dense-equivalent baselines produced by channel scaling)."""
    s = spec.structure
    if spec.family == "mlp":
        return build_mlp(s["in_dim"], s["hidden"], s["classes"], rng,
                         bias=s.get("bias", True),
                         prune_classifier=s.get("prune_classifier", True))
    if spec.family == "cnn-small":
        return build_cnn_small(s["in_shape"], s["widths"], s["classes"], rng,
                               prune_classifier=s.get("prune_classifier", True))
    if spec.family == "wrn":
        return build_wrn_widths(s["stem"], s["widths"], s["blocks_per_group"],
                                s["classes"], rng, in_shape=s["in_shape"],
                                prune_classifier=s.get("prune_classifier", True))
    raise ContractError(f"unknown network family {spec.family!r}")
