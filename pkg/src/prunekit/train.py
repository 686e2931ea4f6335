"""Online-pruning training loop.

Every iteration prunes inside the forward pass (bounds solved per step in
the fixed modes, trainable in adaptive mode), backpropagates through the
straight-through estimator so pruned weights keep receiving updates, and
applies SGD with momentum and decoupled weight decay. Weight decay acts on
weight tensors only, never on bounds, biases or batchnorm parameters.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .dtypes import precision
from .errors import ContractError, DivergenceError, InconsistentConfigError
from .nn import (Network, NetworkSpec, SparsityReport, attained_sparsity,
                 build_network, PRUNE_MASKED, PRUNE_OFF, PRUNE_STE)
from .prune import (PrunableParam, SparsityTarget, solve_bound_binary_search,
                    solve_bound_gaussian)
from .sparsity import (SparsityObjective, contribution_weights,
                       sparsity_penalty, total_loss)
from .special import erf_inv_scalar
from .tensor import Tensor, backward, cross_entropy_logits, no_grad

_SQRT2 = math.sqrt(2.0)

MODES = ("dense", "fixed_bs", "fixed_ga", "adaptive")


@dataclass
class TrainConfig:
    mode: str = "dense"
    epochs: int = 20
    batch_size: int = 64
    lr: float = 0.1
    lr_min: float = 0.0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    restart_period: int = 0  # epochs between warm restarts; 0 = one anneal
    seed: int = 0
    precision: int = 32
    ste: bool = True
    bound_refresh: int = 1  # solve fixed-mode bounds every N iterations
    log_interval: int = 50
    init_sparsity: float = 0.05  # adaptive-mode bound initialisation
    target: Optional[SparsityTarget] = None
    objective: Optional[SparsityObjective] = None
    exempt_layers: Tuple[str, ...] = ()
    checkpoint_every: int = 0  # epochs; 0 = only on request

    def __post_init__(self):
        if self.mode not in MODES:
            raise InconsistentConfigError(f"unknown training mode {self.mode!r}")
        if self.mode in ("fixed_bs", "fixed_ga") and self.target is None:
            raise InconsistentConfigError(f"mode {self.mode} requires target.s")
        if self.mode == "adaptive" and self.objective is None:
            raise InconsistentConfigError("mode adaptive requires an objective")

    def replace(self, **kw) -> "TrainConfig":
        """dataclasses.replace with conveniences for nested fields."""
        if "target_s" in kw:
            s = kw.pop("target_s")
            kw["target"] = SparsityTarget(s=s) if self.target is None else \
                replace(self.target, s=s)
        if "budget_p" in kw:
            b = kw.pop("budget_p")
            obj = self.objective or SparsityObjective(variant="budget_quadratic",
                                                      budget_p=b)
            kw["objective"] = replace(obj, budget_p=b, contrib_p=None, contrib_f=None)
        return replace(self, **kw)


@dataclass
class StepMetrics:
    epoch: int
    iteration: int
    task_loss: float
    sparsity_loss: float
    overall_sparsity: float
    per_layer_sparsity: Tuple[float, ...]
    lr: float
    test_accuracy: Optional[float] = None


@dataclass
class RunResult:
    net: Network
    metrics: List[StepMetrics]
    report: SparsityReport
    test_accuracy: float
    eval_history: List[Tuple[int, float]]  # (epoch, test accuracy)


def cosine_lr(iteration: int, iters_per_restart: int, lr_max: float,
              lr_min: float = 0.0) -> float:
    """Cosine annealing with warm restarts: back to lr_max at every period."""
    if iters_per_restart <= 0:
        raise ContractError("iters_per_restart must be positive")
    t = (iteration % iters_per_restart) / iters_per_restart
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t))


class SGD:
    """SGD with momentum and decoupled weight decay.

    Decay multiplies weight tensors by (1 - weight_decay) each step
    independently of the learning rate; velocity buffers exist for every
    trainable tensor, bounds included.
    """

    def __init__(self, named_params: Sequence[Tuple[str, Tensor]],
                 momentum: float = 0.9, weight_decay: float = 0.0):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.slots = []
        for name, p in named_params:
            if not p.requires_grad:
                continue
            decay = name.rsplit(".", 1)[-1] == "weight"
            self.slots.append((name, p, decay, np.zeros_like(p.data)))

    def step(self, lr: float) -> None:
        for _, p, decay, vel in self.slots:
            if p.grad is None:
                continue
            vel *= self.momentum
            vel += p.grad
            if decay and self.weight_decay:
                p.data *= (1.0 - self.weight_decay)
            p.data -= lr * vel

    def zero_grad(self) -> None:
        for _, p, _, _ in self.slots:
            p.grad = None

    def state_arrays(self):
        return [(name, vel) for name, _, _, vel in self.slots]

    def load_state(self, arrays: dict) -> None:
        for i, (name, p, decay, vel) in enumerate(self.slots):
            if name not in arrays:
                raise ContractError(f"optimizer state missing buffer {name!r}")
            src = arrays[name]
            if src.shape != vel.shape:
                raise ContractError(f"optimizer buffer {name!r} has shape "
                                    f"{src.shape}, expected {vel.shape}")
            self.slots[i] = (name, p, decay, src.astype(vel.dtype, copy=True))


def _solve_fixed_bounds(prunables: Sequence[PrunableParam], mode: str,
                        target: SparsityTarget) -> None:
    for p in prunables:
        sigma = p.refresh_sigma()
        if sigma == 0.0:
            continue  # forward will warn and skip
        if mode == "fixed_ga":
            p.bound.data = np.asarray(_SQRT2 * erf_inv_scalar(target.s),
                                      dtype=p.bound.data.dtype)
        else:
            res = solve_bound_binary_search(p.weights, target)
            p.bound.data = np.asarray(res.bound / sigma, dtype=p.bound.data.dtype)


def _mask_sparsity(prunables: Sequence[PrunableParam]):
    per_layer = []
    pruned = total = 0
    for p in prunables:
        if p.mask is None:
            per_layer.append(0.0)
            total += p.weights.data.size
            continue
        per_layer.append(float(p.mask.mean()))
        pruned += int(p.mask.sum())
        total += p.mask.size
    overall = pruned / total if total else 0.0
    return overall, tuple(per_layer)


def train_step(net: Network, batch, cfg: TrainConfig, opt: SGD,
               prunables: Sequence[PrunableParam],
               objective: Optional[SparsityObjective],
               iteration: int, epoch: int, lr: float) -> StepMetrics:
    """One forward/backward/update cycle; returns the step's metrics.

    Fixed modes re-solve each layer's bound (subject to bound_refresh)
    before the forward; adaptive mode lets the bounds ride the tape.
    """
    xb, yb = batch
    if cfg.mode in ("fixed_bs", "fixed_ga") and \
            iteration % max(cfg.bound_refresh, 1) == 0:
        _solve_fixed_bounds(prunables, cfg.mode, cfg.target)

    logits = net.forward(Tensor(xb))
    task = cross_entropy_logits(logits, yb)
    if cfg.mode == "adaptive":
        loss = total_loss(task, prunables, objective)
        sparsity_val = float(loss.data) - float(task.data)
    else:
        loss = task
        sparsity_val = 0.0
    task_val = float(task.data)
    if not np.isfinite(float(loss.data)):
        raise DivergenceError(
            f"non-finite loss {float(loss.data)} at epoch {epoch}, iteration {iteration}")

    opt.zero_grad()
    backward(loss)
    opt.step(lr)
    if cfg.mode == "adaptive":
        for p in prunables:
            p.clamp_bound()

    overall, per_layer = _mask_sparsity(prunables)
    return StepMetrics(epoch=epoch, iteration=iteration, task_loss=task_val,
                       sparsity_loss=sparsity_val, overall_sparsity=overall,
                       per_layer_sparsity=per_layer, lr=lr)


def evaluate(net: Network, x: np.ndarray, y: np.ndarray,
             batch_size: int = 256) -> float:
    """Classification accuracy with the network as it would be served
    (batchnorm in inference mode, pruning still applied)."""
    net.set_training(False)
    correct = 0
    with no_grad():
        for start in range(0, len(x), batch_size):
            xb = x[start:start + batch_size]
            yb = y[start:start + batch_size]
            logits = net.forward(Tensor(xb))
            correct += int((logits.data.argmax(axis=1) == yb).sum())
    net.set_training(True)
    return correct / len(x)


def _prepare_objective(cfg: TrainConfig, spec: NetworkSpec) -> Optional[SparsityObjective]:
    if cfg.mode != "adaptive":
        return None
    obj = cfg.objective
    updates = {}
    if obj.contrib_p is None:
        updates["contrib_p"] = contribution_weights(spec, "params")
    if obj.contrib_f is None and (obj.budget_f is not None or
                                  obj.resource == "flops"):
        updates["contrib_f"] = contribution_weights(spec, "flops")
    return replace(obj, **updates) if updates else obj


def run_experiment(cfg: TrainConfig, dataset, spec: NetworkSpec = None,
                   net: Network = None, resume_state: Optional[dict] = None,
                   checkpoint_hook=None) -> RunResult:
    """Train a network under the configured pruning mode.

    Deterministic under a fixed seed: weight init, batch order and every
    update depend only on (config, dataset). ``checkpoint_hook(epoch, state)``
    is invoked per checkpoint_every epochs and at the end with everything
    needed to resume or report.
    """
    with precision(cfg.precision):
        if net is None:
            if spec is None:
                raise ContractError("run_experiment needs a spec or a network")
            net = build_network(spec, np.random.default_rng([cfg.seed, 0]))
        if cfg.exempt_layers:
            try:
                net.mark_unprunable(cfg.exempt_layers)
            except ContractError as exc:
                raise InconsistentConfigError(str(exc)) from exc
        spec = net.to_spec()

        prune_mode = PRUNE_OFF if cfg.mode == "dense" else \
            (PRUNE_STE if cfg.ste else PRUNE_MASKED)
        net.set_pruning(prune_mode)
        prunables = [p for _, p in net.prunables()]

        if cfg.mode == "adaptive":
            b0 = _SQRT2 * erf_inv_scalar(cfg.init_sparsity)
            for p in prunables:
                p.bound.requires_grad = True
                p.bound.data = np.asarray(b0, dtype=p.bound.data.dtype)
                p.refresh_sigma()
        objective = _prepare_objective(cfg, spec)

        opt = SGD(net.named_params(), momentum=cfg.momentum,
                  weight_decay=cfg.weight_decay)
        data_rng = np.random.default_rng([cfg.seed, 1])
        start_epoch = 0
        if resume_state is not None:
            _apply_resume(resume_state, net, opt)
            data_rng.bit_generator.state = resume_state["data_rng"]
            start_epoch = resume_state["epoch"]

        x_train, y_train = dataset.x_train, dataset.y_train
        n = len(x_train)
        iters_per_epoch = max(1, math.ceil(n / cfg.batch_size))
        restart_epochs = cfg.restart_period if cfg.restart_period > 0 else cfg.epochs
        iters_per_restart = max(1, restart_epochs * iters_per_epoch)

        metrics: List[StepMetrics] = []
        eval_history: List[Tuple[int, float]] = []
        iteration = start_epoch * iters_per_epoch
        for epoch in range(start_epoch, cfg.epochs):
            order = data_rng.permutation(n)
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                lr = cosine_lr(iteration, iters_per_restart, cfg.lr, cfg.lr_min)
                m = train_step(net, (x_train[idx], y_train[idx]), cfg, opt,
                               prunables, objective, iteration, epoch, lr)
                if iteration % max(cfg.log_interval, 1) == 0:
                    metrics.append(m)
                iteration += 1
            acc = evaluate(net, dataset.x_test, dataset.y_test)
            eval_history.append((epoch, acc))
            last = dataclasses.replace(m, test_accuracy=acc)
            metrics.append(last)
            if checkpoint_hook is not None and cfg.checkpoint_every > 0 and \
                    (epoch + 1) % cfg.checkpoint_every == 0 and epoch + 1 < cfg.epochs:
                checkpoint_hook(epoch + 1, _resume_snapshot(net, opt, data_rng,
                                                            epoch + 1))

        report = attained_sparsity(net) if prunables else _empty_report(net)
        final_acc = eval_history[-1][1] if eval_history else 0.0
        if checkpoint_hook is not None:
            checkpoint_hook(cfg.epochs,
                            _resume_snapshot(net, opt, data_rng, cfg.epochs))
        return RunResult(net=net, metrics=metrics, report=report,
                         test_accuracy=final_acc, eval_history=eval_history)


def _empty_report(net: Network) -> SparsityReport:
    return SparsityReport(rows=[], overall_param_sparsity=0.0,
                          overall_flop_sparsity=0.0, dense_params=0,
                          dense_flops=0, kept_params=0, kept_flops=0)


def _resume_snapshot(net: Network, opt: SGD, data_rng, epoch: int) -> dict:
    return {
        "epoch": epoch,
        "params": {name: p.data.copy() for name, p in net.named_params()},
        "buffers": {name: b.copy() for name, b in net.named_buffers()},
        "masks": {name: (p.mask.copy() if p.mask is not None else None)
                  for name, p in net.prunables()},
        "momentum": {name: v.copy() for name, v in opt.state_arrays()},
        "data_rng": data_rng.bit_generator.state,
    }


def _apply_resume(state: dict, net: Network, opt: SGD) -> None:
    for name, p in net.named_params():
        if name in state["params"]:
            p.data = state["params"][name].astype(p.data.dtype, copy=True)
    buffers = dict(net.named_buffers())
    for name, arr in state["buffers"].items():
        if name in buffers:
            buffers[name][...] = arr
    for name, p in net.prunables():
        m = state["masks"].get(name)
        p.mask = m.copy() if m is not None else None
    opt.load_state(state["momentum"])
