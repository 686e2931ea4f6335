"""prunekit: train networks while pruning weights online.

Magnitude thresholds with per-layer sparsity either fixed by the user
(binary search or Gaussian bound solvers) or discovered through a
differentiable, budget-aware sparsity loss over trainable bounds, trained
end to end with a straight-through estimator.

Submodule imports are lazy so the CLI can configure threading before
numpy loads.
"""

__version__ = "0.1.0"

_LAZY = {
    "Tensor": ("prunekit.tensor", "Tensor"),
    "backward": ("prunekit.tensor", "backward"),
    "no_grad": ("prunekit.tensor", "no_grad"),
    "PrunableParam": ("prunekit.prune", "PrunableParam"),
    "SparsityTarget": ("prunekit.prune", "SparsityTarget"),
    "hard_shrink": ("prunekit.prune", "hard_shrink"),
    "solve_bound_binary_search": ("prunekit.prune", "solve_bound_binary_search"),
    "solve_bound_gaussian": ("prunekit.prune", "solve_bound_gaussian"),
    "sparsity_of_bound": ("prunekit.prune", "sparsity_of_bound"),
    "ste_prune_forward": ("prunekit.prune", "ste_prune_forward"),
    "SparsityObjective": ("prunekit.sparsity", "SparsityObjective"),
    "LayerSparsityState": ("prunekit.sparsity", "LayerSparsityState"),
    "total_loss": ("prunekit.sparsity", "total_loss"),
    "TrainConfig": ("prunekit.train", "TrainConfig"),
    "run_experiment": ("prunekit.train", "run_experiment"),
    "cosine_lr": ("prunekit.train", "cosine_lr"),
    "build_mlp": ("prunekit.nn", "build_mlp"),
    "build_cnn_small": ("prunekit.nn", "build_cnn_small"),
    "build_wrn": ("prunekit.nn", "build_wrn"),
    "attained_sparsity": ("prunekit.nn", "attained_sparsity"),
    "count_params": ("prunekit.nn", "count_params"),
    "count_flops": ("prunekit.nn", "count_flops"),
    "dense_equivalent": ("prunekit.equiv", "dense_equivalent"),
    "tradeoff_curve": ("prunekit.equiv", "tradeoff_curve"),
    "ingest_dataset": ("prunekit.data", "ingest_dataset"),
    "parse_config": ("prunekit.config", "parse_config"),
    "erf_scalar": ("prunekit.special", "erf_scalar"),
    "erf_inv_scalar": ("prunekit.special", "erf_inv_scalar"),
}

__all__ = sorted(_LAZY) + ["__version__"]


def __getattr__(name):
    if name in _LAZY:
        import importlib

        module, attr = _LAZY[name]
        return getattr(importlib.import_module(module), attr)
    raise AttributeError(f"module 'prunekit' has no attribute {name!r}")
