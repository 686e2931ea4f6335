"""Differentiable sparsity losses over per-layer trainable bounds.

Under the Gaussian fit, a layer's sparsity is s_i = erf(b_i / (sigma_i *
sqrt(2))) with b_i the absolute threshold, which makes network density a
smooth function of the bounds. Four variants are provided:

* ``avg``              : mean density  1 - (1/N) sum_i erf(...)
* ``weighted``         : 1 - sum_i c_i erf(...) with contribution weights
                         c_i >= 0 summing to 1, so the value is the true
                         density of the tracked resource (params or flops)
* ``budget_quadratic`` : lam_p * (density_p - B_p)^2 + lam_f * (...)^2
* ``budget_hinge``     : lam_p * max(density_p - B_p, 0) + lam_f * (...),
                         zero anywhere at or under budget

Gradients with respect to the absolute bounds are analytic:
d/db_i [1 - erf(b_i/(sigma_i sqrt(2)))] = -2 exp(-b_i^2/(2 sigma_i^2)) /
(sigma_i sqrt(2 pi)). Sigma is treated as a constant (no gradient flows
through it), and the hinge subgradient at the kink is taken as 0 so the
under-budget region stays pressure-free.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError, DegenerateDistributionError
from .prune import PrunableParam
from .special import erf_scalar
from .tensor import Tensor, attach_node, add

_SQRT2 = math.sqrt(2.0)
_SQRT2PI = math.sqrt(2.0 * math.pi)

VARIANTS = ("avg", "weighted", "budget_quadratic", "budget_hinge")


@dataclass
class SparsityObjective:
    """Which sparsity loss to optimize and with what coefficients.

    Budgets are densities: budget_p = 0.15 means "keep 15% of parameters".
    """

    variant: str
    lam: float = 1.0
    lambda_p: float = 10.0
    lambda_f: float = 10.0
    budget_p: Optional[float] = None
    budget_f: Optional[float] = None
    contrib_p: Optional[np.ndarray] = None
    contrib_f: Optional[np.ndarray] = None
    resource: str = "params"  # weighting used by the 'weighted' variant

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractError(f"unknown sparsity objective variant {self.variant!r}")
        for name in ("lam", "lambda_p", "lambda_f"):
            if getattr(self, name) < 0.0:
                raise ContractError(f"{name} must be nonnegative")
        for name in ("budget_p", "budget_f"):
            val = getattr(self, name)
            if val is not None and not 0.0 < val <= 1.0:
                raise ContractError(f"{name} must lie in (0,1], got {val}")
        if self.variant.startswith("budget") and self.budget_p is None and self.budget_f is None:
            raise ContractError("budget variants need budget_p and/or budget_f")
        for name in ("contrib_p", "contrib_f"):
            c = getattr(self, name)
            if c is not None:
                setattr(self, name, _check_contrib(np.asarray(c, dtype=np.float64), name))


def _check_contrib(c: np.ndarray, name: str = "contrib") -> np.ndarray:
    if c.ndim != 1 or c.size == 0:
        raise ContractError(f"{name} must be a non-empty vector")
    if (c < 0).any():
        raise ContractError(f"{name} must be nonnegative")
    total = float(c.sum())
    if abs(total - 1.0) > 1e-9:
        raise ContractError(f"{name} must sum to 1, sums to {total}")
    return c


@dataclass
class LayerSparsityState:
    """Per-layer absolute bounds and standard deviations, assembled fresh
    each step (never cached across weight updates)."""

    bounds: np.ndarray
    sigmas: np.ndarray

    def __post_init__(self):
        self.bounds = np.asarray(self.bounds, dtype=np.float64)
        self.sigmas = np.asarray(self.sigmas, dtype=np.float64)
        if self.bounds.shape != self.sigmas.shape or self.bounds.ndim != 1:
            raise ContractError("bounds and sigmas must be matching vectors")
        if (self.sigmas <= 0).any():
            raise DegenerateDistributionError("all sigmas must be positive")
        if (self.bounds < 0).any():
            raise ContractError("bounds must be nonnegative")

    @classmethod
    def from_params(cls, params: Sequence[PrunableParam]) -> "LayerSparsityState":
        bounds = np.array([float(p.bound.data) * p.sigma for p in params])
        sigmas = np.array([p.sigma for p in params])
        return cls(bounds, sigmas)

    @property
    def n_layers(self) -> int:
        return self.bounds.size

    def sparsities(self) -> np.ndarray:
        return np.array([erf_scalar(b / (sig * _SQRT2))
                         for b, sig in zip(self.bounds, self.sigmas)])


def _density_grad_per_layer(state: LayerSparsityState) -> np.ndarray:
    """d(1 - erf(b_i/(sigma_i sqrt2)))/db_i for each layer."""
    return -2.0 * np.exp(-state.bounds ** 2 / (2.0 * state.sigmas ** 2)) \
        / (state.sigmas * _SQRT2PI)


def avg_density_loss(state: LayerSparsityState) -> float:
    """Mean network density in (0, 1]."""
    return 1.0 - float(state.sparsities().mean())


def avg_density_grad(state: LayerSparsityState) -> np.ndarray:
    return _density_grad_per_layer(state) / state.n_layers


def weighted_density_loss(state: LayerSparsityState, contrib: np.ndarray) -> float:
    """Density of the resource tracked by the contribution weights.

    Uniform weights (1/N each) reduce this to avg_density_loss exactly.
    """
    c = _check_contrib(np.asarray(contrib, dtype=np.float64))
    if c.size != state.n_layers:
        raise ContractError(
            f"contribution vector has {c.size} entries for {state.n_layers} layers")
    return 1.0 - float((c * state.sparsities()).sum())


def weighted_density_grad(state: LayerSparsityState, contrib: np.ndarray) -> np.ndarray:
    c = np.asarray(contrib, dtype=np.float64)
    return c * _density_grad_per_layer(state)


def contribution_weights(spec, resource: str = "params") -> np.ndarray:
    """Per-layer share of the dense budget, over prunable layers only.

    ``spec`` is a NetworkSpec; layer order matches spec.prunable_layers().
    """
    if resource not in ("params", "flops"):
        raise ContractError(f"resource must be 'params' or 'flops', got {resource!r}")
    layers = spec.prunable_layers()
    if not layers:
        raise ContractError("network has no prunable layers")
    counts = np.array([l.weight_count if resource == "params" else l.flop_count
                       for l in layers], dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise ContractError(f"total {resource} of prunable layers is zero")
    return counts / total


def budget_quadratic_loss(state: LayerSparsityState, obj: SparsityObjective) -> float:
    """Squared deviation of tracked densities from their budgets."""
    if obj.variant != "budget_quadratic":
        raise ContractError(f"objective variant is {obj.variant!r}")
    total = 0.0
    if obj.budget_p is not None and obj.lambda_p > 0:
        d = weighted_density_loss(state, obj.contrib_p)
        total += obj.lambda_p * (d - obj.budget_p) ** 2
    if obj.budget_f is not None and obj.lambda_f > 0:
        d = weighted_density_loss(state, obj.contrib_f)
        total += obj.lambda_f * (d - obj.budget_f) ** 2
    return total


def budget_quadratic_grad(state: LayerSparsityState, obj: SparsityObjective) -> np.ndarray:
    grad = np.zeros(state.n_layers)
    if obj.budget_p is not None and obj.lambda_p > 0:
        d = weighted_density_loss(state, obj.contrib_p)
        grad += 2.0 * obj.lambda_p * (d - obj.budget_p) \
            * weighted_density_grad(state, obj.contrib_p)
    if obj.budget_f is not None and obj.lambda_f > 0:
        d = weighted_density_loss(state, obj.contrib_f)
        grad += 2.0 * obj.lambda_f * (d - obj.budget_f) \
            * weighted_density_grad(state, obj.contrib_f)
    return grad


def budget_hinge_loss(state: LayerSparsityState, obj: SparsityObjective) -> float:
    """Penalty only while a tracked density exceeds its budget."""
    if obj.variant != "budget_hinge":
        raise ContractError(f"objective variant is {obj.variant!r}")
    total = 0.0
    if obj.budget_p is not None and obj.lambda_p > 0:
        d = weighted_density_loss(state, obj.contrib_p)
        total += obj.lambda_p * max(d - obj.budget_p, 0.0)
    if obj.budget_f is not None and obj.lambda_f > 0:
        d = weighted_density_loss(state, obj.contrib_f)
        total += obj.lambda_f * max(d - obj.budget_f, 0.0)
    return total


def budget_hinge_grad(state: LayerSparsityState, obj: SparsityObjective) -> np.ndarray:
    grad = np.zeros(state.n_layers)
    if obj.budget_p is not None and obj.lambda_p > 0:
        d = weighted_density_loss(state, obj.contrib_p)
        if d > obj.budget_p:  # subgradient 0 at the kink
            grad += obj.lambda_p * weighted_density_grad(state, obj.contrib_p)
    if obj.budget_f is not None and obj.lambda_f > 0:
        d = weighted_density_loss(state, obj.contrib_f)
        if d > obj.budget_f:
            grad += obj.lambda_f * weighted_density_grad(state, obj.contrib_f)
    return grad


def sparsity_penalty_value_and_grad(state: LayerSparsityState,
                                    obj: SparsityObjective):
    """(value, d value / d absolute-bound vector) for any variant."""
    if obj.variant == "avg":
        return obj.lam * avg_density_loss(state), obj.lam * avg_density_grad(state)
    if obj.variant == "weighted":
        c = obj.contrib_p if obj.resource == "params" else obj.contrib_f
        if c is None:
            raise ContractError("weighted variant needs contribution weights")
        return (obj.lam * weighted_density_loss(state, c),
                obj.lam * weighted_density_grad(state, c))
    if obj.variant == "budget_quadratic":
        return budget_quadratic_loss(state, obj), budget_quadratic_grad(state, obj)
    return budget_hinge_loss(state, obj), budget_hinge_grad(state, obj)


def sparsity_penalty(params: Sequence[PrunableParam],
                     obj: SparsityObjective) -> Tensor:
    """Tape-aware penalty term over the layers' trainable bounds.

    Reads each layer's sigma as cached by the most recent pruning forward;
    backward scales the absolute-bound gradient by sigma_i to land on the
    sigma-unit trainable bound (sigma itself gets no gradient).
    """
    params = list(params)
    state = LayerSparsityState.from_params(params)
    value, grad_abs = sparsity_penalty_value_and_grad(state, obj)
    sigmas = state.sigmas
    bound_tensors = [p.bound for p in params]
    dtype = bound_tensors[0].data.dtype
    out = Tensor(np.asarray(value, dtype=dtype))

    def backward(g):
        gb = float(g)
        return tuple(np.asarray(gb * grad_abs[i] * sigmas[i], dtype=dtype)
                     for i in range(len(params)))

    return attach_node(out, bound_tensors, backward)


def total_loss(task_loss: Tensor, params: Sequence[PrunableParam],
               obj: SparsityObjective) -> Tensor:
    """Multitask objective: task loss plus the sparsity penalty.

    Backward through the result reaches the weights via the straight-through
    pruning op and the bounds via both the task path and the penalty path.
    """
    return add(task_loss, sparsity_penalty(params, obj))
