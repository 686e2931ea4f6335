"""Command-line experiment runner.

Verbs: ``run`` (one training experiment), ``sweep`` (trade-off curve over
compression ratios), ``report`` (re-derive sparsity artifacts from a
checkpoint), ``export-sparse`` (values+indices arrays for size
measurement), ``gradcheck`` (the finite-difference suite).

Exit codes: 0 success, 2 config error, 3 numeric divergence or failed
gradient check, 4 I/O error.

Heavy imports are deferred so ``--threads`` can pin BLAS pools before
numpy initialises them.
"""

from __future__ import annotations

import argparse
import os
import sys

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="prunekit",
                                 description=__doc__.split("\n\n")[0])
    ap.add_argument("--threads", type=int, default=None,
                    help="cap BLAS/OpenMP threads (set before numpy loads)")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None, help="override seed")
        p.add_argument("--out", type=str, default=None, help="override out_dir")
        p.add_argument("--precision", type=int, choices=(32, 64), default=None)
        p.add_argument("--no-figures", action="store_true",
                       help="emit CSV only, skip PNG rendering")

    p_run = sub.add_parser("run", help="train one experiment from a config")
    p_run.add_argument("config")
    p_run.add_argument("--resume", type=str, default=None,
                       help="checkpoint to resume from")
    common(p_run)

    p_sweep = sub.add_parser("sweep", help="trade-off curve over ratios")
    p_sweep.add_argument("config")
    p_sweep.add_argument("--ratios", type=float, nargs="+", required=True)
    p_sweep.add_argument("--modes", type=str, nargs="+",
                         default=["fixed_bs"],
                         help="pruning modes to sweep (fixed_bs fixed_ga adaptive)")
    common(p_sweep)

    p_rep = sub.add_parser("report", help="sparsity report from a checkpoint")
    p_rep.add_argument("checkpoint")
    p_rep.add_argument("--out", type=str, default=None)
    p_rep.add_argument("--no-figures", action="store_true")

    p_exp = sub.add_parser("export-sparse",
                           help="write values+indices arrays from a checkpoint")
    p_exp.add_argument("checkpoint")
    p_exp.add_argument("--out", type=str, default=None)

    p_gc = sub.add_parser("gradcheck", help="run the finite-difference suite")
    p_gc.add_argument("-q", "--quiet", action="store_true")
    return ap


def _apply_overrides(cfg, args):
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.raw["experiment"]["seed"] = args.seed
        cfg.train_cfg = cfg.train_cfg.replace(seed=args.seed)
    if args.precision is not None:
        cfg.precision = args.precision
        cfg.raw["experiment"]["precision"] = args.precision
        cfg.train_cfg = cfg.train_cfg.replace(precision=args.precision)
    if args.out is not None:
        cfg.out_dir = args.out
        cfg.raw["experiment"]["out_dir"] = args.out
    return cfg


def _network_meta(spec) -> dict:
    return {"family": spec.family, "structure": spec.structure,
            "input_shape": list(spec.input_shape), "classes": spec.classes}


def _cmd_run(args) -> int:
    from . import checkpoint as ckpt_mod
    from . import report as report_mod
    from .config import build_dataset, build_model_spec, echo_config, parse_config

    cfg = _apply_overrides(parse_config(args.config), args)
    os.makedirs(cfg.out_dir, exist_ok=True)
    echo_config(cfg, os.path.join(cfg.out_dir, "config.toml"))
    dataset = build_dataset(cfg)
    spec = build_model_spec(cfg, dataset)

    resume_state = None
    if args.resume:
        resume_state = ckpt_mod.load_checkpoint(args.resume)

    def hook(epoch, snapshot):
        name = ("checkpoint.bin" if epoch >= cfg.train_cfg.epochs
                else f"checkpoint_epoch{epoch}.bin")
        ckpt_mod.save_checkpoint(os.path.join(cfg.out_dir, name), snapshot,
                                 _network_meta(spec), cfg.raw)

    from .train import run_experiment
    result = run_experiment(cfg.train_cfg, dataset, spec=spec,
                            resume_state=resume_state, checkpoint_hook=hook)
    report_mod.emit_reports(cfg.out_dir, result.metrics, result.report,
                            test_accuracy=result.test_accuracy,
                            total_params=spec.total_params,
                            mode=cfg.train_cfg.mode,
                            figures=not args.no_figures)
    print(f"mode={cfg.train_cfg.mode} "
          f"sparsity={result.report.overall_param_sparsity * 100:.2f}% "
          f"test_acc={result.test_accuracy * 100:.2f}% -> {cfg.out_dir}")
    return EXIT_OK


def _cmd_sweep(args) -> int:
    from . import report as report_mod
    from .config import build_dataset, build_model_spec, echo_config, parse_config
    from .equiv import tradeoff_curve

    cfg = _apply_overrides(parse_config(args.config), args)
    os.makedirs(cfg.out_dir, exist_ok=True)
    echo_config(cfg, os.path.join(cfg.out_dir, "config.toml"))
    dataset = build_dataset(cfg)
    spec = build_model_spec(cfg, dataset)
    rows = tradeoff_curve(spec, args.ratios, cfg.train_cfg, dataset,
                          modes=args.modes)
    report_mod.emit_tradeoff(cfg.out_dir, rows, figures=not args.no_figures)
    for r in rows:
        print(f"ratio={r.ratio:.3f} mode={r.mode:<12} params={r.params:<10} "
              f"error={r.error * 100:.2f}%")
    return EXIT_OK


def _load_net_from_checkpoint(path):
    import numpy as np

    from .checkpoint import load_checkpoint
    from .nn import NetworkSpec, build_network

    data = load_checkpoint(path)
    meta = data["network"]
    spec = NetworkSpec(family=meta["family"], structure=meta["structure"],
                       input_shape=tuple(meta["input_shape"]),
                       classes=meta["classes"])
    net = build_network(spec, np.random.default_rng(0))
    for name, p in net.named_params():
        if name in data["params"]:
            p.data = data["params"][name].astype(p.data.dtype, copy=True)
    buffers = dict(net.named_buffers())
    for name, arr in data["buffers"].items():
        if name in buffers:
            buffers[name][...] = arr
    for name, p in net.prunables():
        if name in data["masks"]:
            p.mask = data["masks"][name]
    return net, data


def _cmd_report(args) -> int:
    from . import report as report_mod
    from .nn import attained_sparsity

    net, data = _load_net_from_checkpoint(args.checkpoint)
    out_dir = args.out or os.path.dirname(os.path.abspath(args.checkpoint))
    os.makedirs(out_dir, exist_ok=True)
    rep = attained_sparsity(net)
    report_mod.write_layers_csv(rep, os.path.join(out_dir, "layers.csv"))
    report_mod.write_summary(rep, os.path.join(out_dir, "summary.txt"),
                             total_params=net.to_spec().total_params)
    if not args.no_figures:
        report_mod.render_layers(rep, os.path.join(out_dir, "layers.png"))
    print(f"overall sparsity {rep.overall_param_sparsity * 100:.2f}% "
          f"({rep.kept_params}/{rep.dense_params} weights kept) -> {out_dir}")
    return EXIT_OK


def _cmd_export_sparse(args) -> int:
    import numpy as np

    from .prune import hard_shrink

    net, data = _load_net_from_checkpoint(args.checkpoint)
    out_dir = args.out or os.path.dirname(os.path.abspath(args.checkpoint))
    os.makedirs(out_dir, exist_ok=True)
    arrays = {}
    total = nnz = 0
    for name, p in net.prunables():
        sigma = p.refresh_sigma()
        pruned = hard_shrink(p.weights.data, float(p.bound.data) * sigma)
        flat = pruned.reshape(-1)
        idx = np.flatnonzero(flat).astype(np.int64)
        key = name.replace(".", "_")
        arrays[f"{key}_values"] = flat[idx]
        arrays[f"{key}_indices"] = idx
        arrays[f"{key}_shape"] = np.asarray(pruned.shape, dtype=np.int64)
        total += flat.size
        nnz += idx.size
    path = os.path.join(out_dir, "sparse.npz")
    np.savez(path, **arrays)
    print(f"wrote {path}: {nnz}/{total} nonzeros "
          f"({(1 - nnz / total) * 100:.2f}% sparse)" if total else
          f"wrote {path}: no prunable layers")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    from .gradcheck import run_full_suite

    results = run_full_suite(verbose=not args.quiet)
    return EXIT_OK if all(r.ok for r in results) else EXIT_NUMERIC


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.threads is not None and args.threads > 0:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ[var] = str(args.threads)

    from .errors import (CheckpointError, ConfigError, ContractError,
                         DatasetError, DivergenceError)

    handler = {
        "run": _cmd_run,
        "sweep": _cmd_sweep,
        "report": _cmd_report,
        "export-sparse": _cmd_export_sparse,
        "gradcheck": _cmd_gradcheck,
    }[args.command]
    try:
        return handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, DatasetError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ContractError as exc:
        print(f"invalid request: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
