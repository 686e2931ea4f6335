"""Magnitude-threshold pruning and its straight-through training gradient.

A layer is pruned by zeroing every weight whose magnitude falls strictly
below a threshold. The threshold is dynamic: the stored bound ``b`` is
expressed in units of the layer's live standard deviation, so the absolute
cutoff ``b * sigma`` tracks the weight distribution as it evolves during
training. Two solvers recover a bound for a requested sparsity level:

* binary search on the empirical magnitude distribution (precise, costs a
  few passes over the weights), and
* a closed form under a zero-mean Gaussian assumption,
  ``threshold = sigma * sqrt(2) * erf_inv(s)`` (cheap, approximate).

During backpropagation the threshold op is treated as the identity on the
weights (straight-through), so pruned weights keep training and may
re-enter the active set. The bound itself receives the analytic gradient
``dL/db = sum_i ((w~_i - w_i) / b) * dL/dw~_i``, which only pruned entries
contribute to.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .errors import ContractError, DegenerateDistributionError
from .special import erf_inv_scalar, erf_scalar
from .tensor import Tensor, attach_node

_SQRT2 = math.sqrt(2.0)

# Cap on the sigma-unit bound: keeps erf(b/sqrt(2)) inside its useful range
# and prevents a layer from being erased outright.
BOUND_MAX = _SQRT2 * erf_inv_scalar(0.9999)


@dataclass
class SparsityTarget:
    """Requested sparsity level with the solver's approximation margin."""

    s: float
    epsilon: float = 1e-3
    max_iters: int = 50

    def __post_init__(self):
        if not 0.0 <= self.s < 1.0:
            raise ContractError(f"sparsity target must lie in [0,1), got {self.s}")
        if self.epsilon <= 0.0:
            raise ContractError(f"epsilon must be positive, got {self.epsilon}")
        if self.s + self.epsilon >= 1.0:
            raise ContractError(
                f"target {self.s} + epsilon {self.epsilon} must stay below 1")
        if self.max_iters < 1:
            raise ContractError("max_iters must be at least 1")


@dataclass
class PrunableParam:
    """A weight tensor paired with its pruning state.

    ``bound`` is the trainable threshold in sigma units; ``sigma`` is the
    standard deviation of the flattened weights, recomputed on every
    forward and treated as a constant in all gradients. ``mask`` marks the
    entries pruned by the most recent forward.
    """

    weights: Tensor
    bound: Tensor
    sigma: float = 0.0
    mask: Optional[np.ndarray] = None
    mean_mode: str = "assume-zero"  # or "center"

    def __post_init__(self):
        if self.mean_mode not in ("assume-zero", "center"):
            raise ContractError(f"unknown mean_mode {self.mean_mode!r}")
        if float(self.bound.data) < 0.0:
            raise ContractError("bound must be nonnegative")

    @classmethod
    def wrap(cls, weights: Tensor, bound_value: float = 0.0,
             trainable_bound: bool = False, mean_mode: str = "assume-zero"):
        bound = Tensor(np.asarray(bound_value, dtype=weights.data.dtype),
                       requires_grad=trainable_bound)
        return cls(weights=weights, bound=bound, mean_mode=mean_mode)

    def refresh_sigma(self) -> float:
        self.sigma = float(np.std(self.weights.data))
        return self.sigma

    def clamp_bound(self) -> None:
        self.bound.data = np.clip(self.bound.data, 0.0, BOUND_MAX)


class BoundResult(NamedTuple):
    bound: float
    attained: float
    iterations: int
    converged: bool


def hard_shrink(w, b: float):
    """Zero every entry with |w| strictly below b; entries at b are kept."""
    if b < 0.0:
        raise ContractError(f"shrink bound must be nonnegative, got {b}")
    values = w.data if isinstance(w, Tensor) else np.asarray(w)
    out = np.where(np.abs(values) < b, np.zeros((), dtype=values.dtype), values)
    if isinstance(w, Tensor):
        return Tensor(out, dtype=values.dtype)
    return out


def solve_bound_binary_search(weights, target: SparsityTarget) -> BoundResult:
    """Find an absolute threshold whose attained sparsity is within epsilon
    of the target, by bisection on the magnitude distribution.

    Never raises on a hard target: with heavy ties the exact level may be
    unreachable, in which case the best bound seen is returned with its
    attained sparsity (ties resolved toward the lower sparsity).
    """
    mags = np.abs(weights.data if isinstance(weights, Tensor) else np.asarray(weights)).ravel()
    if mags.size == 0:
        raise ContractError("cannot solve a bound for an empty weight tensor")
    n = mags.size
    lo, hi = 0.0, float(mags.max()) * (1.0 + 1e-6) + 1e-12
    best_b, best_att = 0.0, 0.0
    best_gap = abs(0.0 - target.s)
    iters = 0
    for iters in range(1, target.max_iters + 1):
        mid = 0.5 * (lo + hi)
        att = float(np.count_nonzero(mags < mid)) / n
        gap = abs(att - target.s)
        if gap < best_gap or (gap == best_gap and att < best_att):
            best_b, best_att, best_gap = mid, att, gap
        if gap < target.epsilon:
            return BoundResult(mid, att, iters, True)
        if att < target.s:
            lo = mid
        else:
            hi = mid
    return BoundResult(best_b, best_att, iters, False)


def solve_bound_gaussian(sigma: float, s: float) -> float:
    """Absolute threshold for sparsity s under a zero-mean Gaussian fit."""
    if sigma <= 0.0:
        raise DegenerateDistributionError(
            f"gaussian bound needs sigma > 0, got {sigma}")
    if not 0.0 <= s < 1.0:
        raise ContractError(f"sparsity must lie in [0,1), got {s}")
    return sigma * _SQRT2 * erf_inv_scalar(s)


def sparsity_of_bound(b: float, sigma: float) -> float:
    """Predicted sparsity of an absolute threshold under the Gaussian fit:
    s = erf(b / (sigma * sqrt(2))). Inverse of solve_bound_gaussian."""
    if sigma <= 0.0:
        raise DegenerateDistributionError(
            f"sparsity_of_bound needs sigma > 0, got {sigma}")
    if b < 0.0:
        raise ContractError(f"bound must be nonnegative, got {b}")
    return erf_scalar(b / (sigma * _SQRT2))


def _prune_arrays(p: PrunableParam):
    """Shared forward math: returns (pruned values, mask, fill value)."""
    w = p.weights.data
    sigma = p.refresh_sigma()
    if sigma == 0.0:
        warnings.warn("all weights equal: skipping prune for this layer",
                      RuntimeWarning, stacklevel=3)
        p.mask = np.zeros(w.shape, dtype=bool)
        return w.copy(), p.mask, 0.0
    mu = 0.0 if p.mean_mode == "assume-zero" else float(w.mean())
    threshold = float(p.bound.data) * sigma
    mask = np.abs(w - mu) < threshold
    out = np.where(mask, np.asarray(mu, dtype=w.dtype), w)
    p.mask = mask
    return out, mask, mu


def ste_prune_forward(p: PrunableParam) -> Tensor:
    """Prune the wrapped weights at threshold bound*sigma and register the
    straight-through backward node.

    Backward passes the upstream gradient to the weights unchanged and
    gives the bound its analytic gradient; at bound == 0 the pruned set is
    empty, so the bound gradient is 0 by convention.
    """
    out_data, mask, _mu = _prune_arrays(p)
    out = Tensor(out_data, dtype=p.weights.data.dtype)
    w = p.weights
    b = p.bound

    def backward(g):
        bval = float(b.data)
        if bval > 0.0:
            diff = (out_data - w.data) / bval
            grad_b = np.asarray((diff * g).sum(), dtype=b.data.dtype)
        else:
            grad_b = np.zeros((), dtype=b.data.dtype)
        return g, grad_b

    return attach_node(out, (w, b), backward)


def masked_prune_forward(p: PrunableParam) -> Tensor:
    """Same forward as ste_prune_forward but with the plain (non-STE)
    backward: pruned weights receive zero gradient and the bound none.

    Kept for the ablation that shows why the straight-through estimator is
    needed at all.
    """
    out_data, mask, _mu = _prune_arrays(p)
    out = Tensor(out_data, dtype=p.weights.data.dtype)
    w = p.weights
    keep = ~mask

    def backward(g):
        return (g * keep, None)

    return attach_node(out, (w, p.bound), backward)
