"""Run artifacts: delimited outputs and the figures rendered beside them.

Every run directory receives the scalar series as CSV (convergence.csv,
layers.csv, and for sweeps tradeoff.csv) plus matching PNG renderings and
a human-readable summary table. All files are reproducible byte-for-byte
from (config, seed, dataset).
"""

from __future__ import annotations

import csv
import os
from typing import List, Optional, Sequence

from .nn import SparsityReport
from .train import StepMetrics


def _fig_backend():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


# --------------------------------------------------------------------------
# CSV


def write_convergence_csv(metrics: Sequence[StepMetrics], path: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "epoch", "task_loss", "sparsity_loss",
                    "overall_sparsity", "lr", "test_accuracy"])
        for m in metrics:
            acc = "" if m.test_accuracy is None else f"{m.test_accuracy:.6f}"
            w.writerow([m.iteration, m.epoch, f"{m.task_loss:.8f}",
                        f"{m.sparsity_loss:.8f}", f"{m.overall_sparsity:.6f}",
                        f"{m.lr:.8f}", acc])


def write_layers_csv(report: SparsityReport, path: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "weights", "sparsity", "kept_params", "kept_flops"])
        for row in report.rows:
            w.writerow([row.name, row.weight_count, f"{row.sparsity:.6f}",
                        row.kept_params, row.kept_flops])


def write_tradeoff_csv(rows, path: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ratio", "mode", "params", "error", "sparsity"])
        for r in rows:
            w.writerow([f"{r.ratio:.6f}", r.mode, r.params,
                        f"{r.error:.6f}", f"{r.sparsity:.6f}"])


def write_summary(report: SparsityReport, path: str,
                  test_accuracy: Optional[float] = None,
                  total_params: Optional[int] = None,
                  mode: str = "") -> None:
    lines = []
    if mode:
        lines.append(f"mode: {mode}")
    if total_params is not None:
        kept_total = total_params - (report.dense_params - report.kept_params)
        lines.append(f"params (dense -> kept): {total_params} -> {kept_total} "
                     f"({kept_total / 1e6:.3f}M)")
    lines.append(f"prunable weights: {report.dense_params}")
    lines.append(f"overall sparsity: {report.overall_param_sparsity * 100:.2f}%")
    lines.append(f"overall flop sparsity: {report.overall_flop_sparsity * 100:.2f}%")
    if test_accuracy is not None:
        lines.append(f"test accuracy: {test_accuracy * 100:.2f}%")
    lines.append("")
    lines.append(f"{'layer':<28}{'#W':>10}{'sparsity%':>11}{'kept':>10}")
    for row in report.rows:
        lines.append(f"{row.name:<28}{row.weight_count:>10}"
                     f"{row.sparsity * 100:>11.2f}{row.kept_params:>10}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# figures


def render_convergence(metrics: Sequence[StepMetrics], path: str) -> None:
    plt = _fig_backend()
    iters = [m.iteration for m in metrics]
    fig, ax1 = plt.subplots(figsize=(7, 4.2))
    ax1.plot(iters, [m.task_loss for m in metrics], label="task loss",
             color="tab:blue", lw=1.2)
    if any(m.sparsity_loss for m in metrics):
        ax1.plot(iters, [m.sparsity_loss for m in metrics],
                 label="sparsity loss", color="tab:cyan", lw=1.0)
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("loss")
    ax2 = ax1.twinx()
    ax2.plot(iters, [m.overall_sparsity for m in metrics],
             label="sparsity", color="tab:red", lw=1.2)
    evals = [(m.iteration, m.test_accuracy) for m in metrics
             if m.test_accuracy is not None]
    if evals:
        ax2.plot([e[0] for e in evals], [e[1] for e in evals],
                 label="test acc", color="tab:green", marker="o", ms=3, lw=1.0)
    ax2.set_ylabel("sparsity / accuracy")
    ax2.set_ylim(0, 1.02)
    h1, l1 = ax1.get_legend_handles_labels()
    h2, l2 = ax2.get_legend_handles_labels()
    ax1.legend(h1 + h2, l1 + l2, loc="center right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_layers(report: SparsityReport, path: str) -> None:
    plt = _fig_backend()
    names = [r.name for r in report.rows]
    values = [r.sparsity * 100 for r in report.rows]
    fig, ax = plt.subplots(figsize=(max(5.0, 0.45 * len(names) + 2), 4))
    ax.bar(range(len(names)), values, color="tab:blue")
    ax.axhline(report.overall_param_sparsity * 100, color="tab:red", ls="--",
               lw=1, label="overall")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=75, fontsize=7)
    ax.set_ylabel("sparsity (%)")
    ax.set_ylim(0, 100)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_tradeoff(rows, path: str) -> None:
    plt = _fig_backend()
    modes = sorted({r.mode for r in rows})
    fig, ax = plt.subplots(figsize=(6, 4.2))
    for mode in modes:
        pts = sorted([(r.params, r.error) for r in rows if r.mode == mode])
        ax.plot([p[0] for p in pts], [p[1] * 100 for p in pts],
                marker="o", ms=4, label=mode)
    ax.set_xlabel("parameters")
    ax.set_ylabel("test error (%)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# --------------------------------------------------------------------------
# orchestration


def emit_reports(out_dir: str, metrics: Sequence[StepMetrics],
                 report: SparsityReport, test_accuracy: Optional[float] = None,
                 total_params: Optional[int] = None, mode: str = "",
                 figures: bool = True) -> List[str]:
    """Write the full artifact set for one run; returns the paths written."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    p = os.path.join(out_dir, "convergence.csv")
    write_convergence_csv(metrics, p)
    written.append(p)
    p = os.path.join(out_dir, "layers.csv")
    write_layers_csv(report, p)
    written.append(p)
    p = os.path.join(out_dir, "summary.txt")
    write_summary(report, p, test_accuracy=test_accuracy,
                  total_params=total_params, mode=mode)
    written.append(p)
    if figures:
        p = os.path.join(out_dir, "convergence.png")
        render_convergence(metrics, p)
        written.append(p)
        p = os.path.join(out_dir, "layers.png")
        render_layers(report, p)
        written.append(p)
    return written


def emit_tradeoff(out_dir: str, rows, figures: bool = True) -> List[str]:
    os.makedirs(out_dir, exist_ok=True)
    written = [os.path.join(out_dir, "tradeoff.csv")]
    write_tradeoff_csv(rows, written[0])
    if figures:
        p = os.path.join(out_dir, "tradeoff.png")
        render_tradeoff(rows, p)
        written.append(p)
    return written
