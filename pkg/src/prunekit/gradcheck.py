"""Central finite-difference verification of every gradient path.

All checks run in 64-bit mode. Smooth paths (tensor ops, the erf-based
sparsity penalties, and the bound gradient of the full objective while
nothing is pruned) are compared against honest central differences of the
actual forward. The straight-through bound gradient is different in kind:
the hard threshold makes the pruned tensor piecewise constant in the
bound, so its true derivative is zero almost everywhere and the estimator
is deliberately inconsistent with it. For that path the oracle differences
the estimator's own linearized surrogate, w + (b'/b) * (w~ - w), built
directly in numpy, which has the estimator's formula as its exact
derivative. Likewise, pruned weights receive a pass-through gradient the
real forward does not have, so weight checks through an active pruning op
are restricted to kept coordinates.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, List, Sequence

import numpy as np

from . import tensor as T
from .dtypes import precision
from .nn import BatchNorm2d, build_mlp
from .prune import PrunableParam, ste_prune_forward
from .sparsity import (LayerSparsityState, SparsityObjective,
                       avg_density_grad, avg_density_loss,
                       budget_hinge_grad, budget_hinge_loss,
                       budget_quadratic_grad, budget_quadratic_loss,
                       sparsity_penalty, total_loss,
                       weighted_density_grad, weighted_density_loss)
from .tensor import Tensor, backward, cross_entropy_logits


@dataclass
class CheckResult:
    name: str
    max_err: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.max_err <= self.tol


def numeric_grad(f: Callable[[], float], x: np.ndarray,
                 h: float = 1e-6) -> np.ndarray:
    """Central differences of a scalar function w.r.t. an array it reads."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        step = h * max(1.0, abs(orig))
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _check(name: str, loss_fn: Callable[[], Tensor],
           params: Sequence[Tensor], tol: float,
           coords_mask=None) -> List[CheckResult]:
    """Backward once, then FD each parameter; coords_mask optionally
    restricts the comparison (same shape as the parameter)."""
    for p in params:
        p.grad = None
    loss = loss_fn()
    backward(loss)
    results = []
    for j, p in enumerate(params):
        analytic = p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
        numeric = numeric_grad(lambda: float(loss_fn().data), p.data)
        if coords_mask is not None and coords_mask[j] is not None:
            keep = coords_mask[j]
            analytic = analytic[keep]
            numeric = numeric[keep]
        results.append(CheckResult(f"{name}[arg{j}]",
                                   max_rel_err(analytic, numeric), tol))
    return results


def _tensor_op_checks(rng) -> List[CheckResult]:
    out: List[CheckResult] = []
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    u = rng.normal(size=(3, 2))
    out += _check("matmul", lambda: T.tsum(T.mul(T.matmul(a, b), Tensor(u))),
                  [a, b], 1e-6)

    x = Tensor(rng.normal(size=(2, 3, 8, 8)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 3, 3, 3)) * 0.5, requires_grad=True)
    u = rng.normal(size=(2, 4, 8, 8))
    out += _check("conv2d_s1p1",
                  lambda: T.tsum(T.mul(T.conv2d(x, w, 1, 1), Tensor(u))),
                  [x, w], 1e-5)
    u2 = rng.normal(size=(2, 4, 3, 3))
    out += _check("conv2d_s2p0",
                  lambda: T.tsum(T.mul(T.conv2d(x, w, 2, 0), Tensor(u2))),
                  [x, w], 1e-5)

    v = Tensor(rng.normal(size=(5, 6)) + np.where(rng.normal(size=(5, 6)) > 0,
                                                  0.3, -0.3),
               requires_grad=True)
    uv = rng.normal(size=(5, 6))
    out += _check("relu", lambda: T.tsum(T.mul(T.relu(v), Tensor(uv))),
                  [v], 1e-6)

    p = Tensor(rng.uniform(0.5, 2.0, size=(4, 3)), requires_grad=True)
    q = Tensor(rng.normal(size=(3,)), requires_grad=True)
    u = rng.normal(size=(4, 3))
    out += _check("broadcast_add_mul",
                  lambda: T.tsum(T.mul(T.mul(p, T.add(p, q)), Tensor(u))),
                  [p, q], 1e-6)
    out += _check("pow_sqrt",
                  lambda: T.tsum(T.pow_const(T.add_const(T.mul(p, p), 1.0), 0.5)),
                  [p], 1e-6)
    um = rng.normal(size=(2,))
    out += _check("mean_axes",
                  lambda: T.tsum(T.mul(T.tmean(T.reshape(p, (2, 2, 3)), axis=(0, 2)),
                                       Tensor(um))),
                  [p], 1e-6)

    logits = Tensor(rng.normal(size=(6, 4)), requires_grad=True)
    labels = rng.integers(0, 4, size=6)
    out += _check("cross_entropy",
                  lambda: cross_entropy_logits(logits, labels), [logits], 1e-6)

    bn = BatchNorm2d(3)
    with precision(64):
        bn.gamma = Tensor(rng.uniform(0.5, 1.5, size=3), requires_grad=True)
        bn.beta = Tensor(rng.normal(size=3), requires_grad=True)
        bn.running_mean = np.zeros(3)
        bn.running_var = np.ones(3)
    xb = Tensor(rng.normal(size=(4, 3, 5, 5)), requires_grad=True)
    ub = rng.normal(size=(4, 3, 5, 5))

    def bn_loss():
        bn.running_mean = np.zeros(3)  # keep running stats out of the check
        bn.running_var = np.ones(3)
        return T.tsum(T.mul(bn.forward(xb), Tensor(ub)))

    out += _check("batchnorm", bn_loss, [xb, bn.gamma, bn.beta], 1e-5)
    return out


def _ste_checks(rng) -> List[CheckResult]:
    out: List[CheckResult] = []
    w_data = rng.normal(size=(6, 5))
    w = Tensor(w_data, requires_grad=True)
    p = PrunableParam.wrap(w, trainable_bound=True)
    sigma = float(np.std(w.data))
    mags = np.sort(np.abs(w.data).ravel())
    # place the threshold mid-gap so the mask cannot flip under differencing
    cut = mags.size // 3
    thr = 0.5 * (mags[cut - 1] + mags[cut])
    p.bound.data = np.asarray(thr / sigma)
    u = rng.normal(size=w.data.shape)

    # (1) straight-through identity on the weights
    w.grad = None
    p.bound.grad = None
    backward(T.tsum(T.mul(ste_prune_forward(p), Tensor(u))))
    identity_err = float(np.max(np.abs(w.grad - u)))
    out.append(CheckResult("ste_grad_w_identity", identity_err, 0.0))

    # (2) bound gradient vs the estimator's linearized surrogate,
    # constructed independently: w + (b'/b) * (w~ - w)
    analytic_gb = float(p.bound.grad)
    base_b = float(p.bound.data)
    wt = np.where(np.abs(w_data) < base_b * sigma, 0.0, w_data)

    def surrogate(bprime: float) -> float:
        return float((u * (w_data + (bprime / base_b) * (wt - w_data))).sum())

    h = 1e-6 * max(1.0, abs(base_b))
    numeric_gb = (surrogate(base_b + h) - surrogate(base_b - h)) / (2 * h)
    out.append(CheckResult("ste_grad_b_surrogate",
                           max_rel_err(np.array([analytic_gb]),
                                       np.array([numeric_gb])), 1e-6))

    # (3) weight gradients through an active pruning op agree with honest
    # finite differences on the kept coordinates
    keep = ~p.mask

    def layer_loss():
        return T.tsum(T.mul(ste_prune_forward(p), Tensor(u)))

    out += _check("ste_kept_weights", layer_loss, [w], 1e-6,
                  coords_mask=[keep])
    return out


def _sparsity_loss_checks(rng) -> List[CheckResult]:
    out: List[CheckResult] = []
    n = 3
    bounds = rng.uniform(0.2, 2.0, size=n)
    sigmas = rng.uniform(0.5, 2.0, size=n)
    contrib = rng.uniform(0.5, 2.0, size=n)
    contrib /= contrib.sum()

    def fd(value_fn) -> np.ndarray:
        return numeric_grad(value_fn, bounds)

    state = lambda: LayerSparsityState(bounds.copy(), sigmas)
    out.append(CheckResult(
        "avg_density_grad",
        max_rel_err(avg_density_grad(state()),
                    fd(lambda: avg_density_loss(LayerSparsityState(bounds, sigmas)))),
        1e-6))
    out.append(CheckResult(
        "weighted_density_grad",
        max_rel_err(weighted_density_grad(state(), contrib),
                    fd(lambda: weighted_density_loss(
                        LayerSparsityState(bounds, sigmas), contrib))),
        1e-6))

    objq = SparsityObjective(variant="budget_quadratic", lambda_p=2.0,
                             lambda_f=1.5, budget_p=0.3, budget_f=0.4,
                             contrib_p=contrib, contrib_f=contrib[::-1].copy())
    out.append(CheckResult(
        "budget_quadratic_grad",
        max_rel_err(budget_quadratic_grad(state(), objq),
                    fd(lambda: budget_quadratic_loss(
                        LayerSparsityState(bounds, sigmas), objq))),
        1e-6))

    objh = SparsityObjective(variant="budget_hinge", lambda_p=2.0,
                             lambda_f=0.0, budget_p=0.05,  # well over budget
                             contrib_p=contrib)
    out.append(CheckResult(
        "budget_hinge_grad",
        max_rel_err(budget_hinge_grad(state(), objh),
                    fd(lambda: budget_hinge_loss(
                        LayerSparsityState(bounds, sigmas), objh))),
        1e-6))
    return out


def _total_loss_checks(rng) -> List[CheckResult]:
    """Bound gradients of the full objective on a 2-layer net, honest FD in
    the regime where nothing is pruned (there the estimator's task-path
    term is exactly zero, so the true derivative exists)."""
    out: List[CheckResult] = []
    net = build_mlp(4, [7], 3, rng)
    net.set_pruning("ste")
    prunables = [p for _, p in net.prunables()]
    xb = rng.normal(size=(10, 4))
    yb = rng.integers(0, 3, size=10)
    for p in prunables:
        p.bound.requires_grad = True
        sigma = p.refresh_sigma()
        min_mag = float(np.min(np.abs(p.weights.data)))
        p.bound.data = np.asarray(0.25 * min_mag / sigma)  # below every weight
    obj = SparsityObjective(variant="avg", lam=0.7)

    def loss_fn():
        logits = net.forward(Tensor(xb))
        return total_loss(cross_entropy_logits(logits, yb), prunables, obj)

    out += _check("total_loss_bounds_unpruned", loss_fn,
                  [p.bound for p in prunables], 1e-4)

    # penalty-only tape op at an ordinary operating point
    for p in prunables:
        p.refresh_sigma()
        p.bound.data = np.asarray(rng.uniform(0.5, 1.5))
    out += _check("sparsity_penalty_bounds",
                  lambda: sparsity_penalty(prunables, obj),
                  [p.bound for p in prunables], 1e-6)
    return out


def run_full_suite(verbose: bool = False) -> List[CheckResult]:
    """Run every gradient check at 64-bit precision; fast (seconds)."""
    t0 = time.time()
    results: List[CheckResult] = []
    with precision(64):
        rng = np.random.default_rng(20240817)
        results += _tensor_op_checks(rng)
        results += _ste_checks(rng)
        results += _sparsity_loss_checks(rng)
        results += _total_loss_checks(rng)
    if verbose:
        for r in results:
            status = "PASS" if r.ok else "FAIL"
            print(f"[{status}] {r.name}: max rel err {r.max_err:.3e} "
                  f"(tol {r.tol:.1e})")
        print(f"gradient suite: {sum(r.ok for r in results)}/{len(results)} "
              f"passed in {time.time() - t0:.1f}s")
    return results
