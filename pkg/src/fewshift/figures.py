"""Matplotlib rendering for sweep reports and scaling studies.

Figures are written next to the delimited report output; all rendering uses
the Agg backend so the CLI works headless.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .experiment import ExperimentReport, ScalingStudyResult  # noqa: E402


def render_report_figures(report: ExperimentReport, outdir: str) -> list[str]:
    """Metric vs training-data-fraction curves, one panel each for the ID and
    OOD test splits, with seed error bars."""
    os.makedirs(outdir, exist_ok=True)
    fig, axes = plt.subplots(1, 2, figsize=(11, 4.2), sharey=True)
    for split, ax in zip(("id", "ood"), axes):
        for variant in report.variants:
            xs, ys, es = [], [], []
            for fr in report.fractions:
                c = report.cells[(variant, fr)]
                if c.missing:
                    continue
                xs.append(100.0 * fr)
                ys.append(c.mean_id if split == "id" else c.mean_ood)
                es.append(c.std_id if split == "id" else c.std_ood)
            ax.errorbar(xs, ys, yerr=es, marker="o", markersize=3, capsize=2, label=variant)
        ax.set_xlabel("training data used (%)")
        ax.set_title(f"{split.upper()} test")
        ax.grid(alpha=0.3)
    axes[0].set_ylabel(f"{report.metric} (%)")
    axes[1].legend(fontsize=8)
    fig.tight_layout()
    path = os.path.join(outdir, "fractions.png")
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return [path]


def render_scaling_figures(result: ScalingStudyResult, outdir: str) -> list[str]:
    """Training-loss curves per worker count plus the scale-efficiency bars."""
    os.makedirs(outdir, exist_ok=True)
    written = []

    fig, ax = plt.subplots(figsize=(6, 4))
    for row in result.rows:
        ax.plot(range(1, len(row.epoch_losses) + 1), row.epoch_losses, label=f"k={row.num_workers}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = os.path.join(outdir, "scaling_losses.png")
    fig.savefig(path, dpi=150)
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(5, 3.5))
    ks = [str(r.num_workers) for r in result.rows]
    ax.bar(ks, [r.efficiency_percent for r in result.rows], color="tab:blue")
    ax.set_xlabel("workers")
    ax.set_ylabel("scale efficiency (%)")
    ax.axhline(100.0, color="gray", linestyle="--", linewidth=0.8)
    fig.tight_layout()
    path = os.path.join(outdir, "scaling_efficiency.png")
    fig.savefig(path, dpi=150)
    plt.close(fig)
    written.append(path)
    return written
