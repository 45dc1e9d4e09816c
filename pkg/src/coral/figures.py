"""Matplotlib figures written next to the delimited outputs of each command."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def save_training_curves(runlog, path, val_label: str = "validation reward") -> None:
    """Train loss and validation metric per epoch on twin axes."""
    epochs = [r.epoch for r in runlog.records]
    fig, ax_loss = plt.subplots(figsize=(7, 4.5))
    ax_loss.plot(epochs, [r.train_loss for r in runlog.records], color="#1f77b4", marker="o", label="train loss")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("train loss", color="#1f77b4")
    ax_loss.tick_params(axis="y", labelcolor="#1f77b4")

    ax_val = ax_loss.twinx()
    ax_val.plot(epochs, [r.val_r3 for r in runlog.records], color="#d62728", marker="s", label=val_label)
    ax_val.set_ylabel(val_label, color="#d62728")
    ax_val.tick_params(axis="y", labelcolor="#d62728")
    if runlog.records:
        ax_val.axvline(runlog.best_epoch, color="gray", linestyle="--", linewidth=1)

    fig.tight_layout()
    fig.savefig(Path(path), dpi=120)
    plt.close(fig)


def save_retrieval_curves(history: list[dict], path) -> None:
    """Scorer training loss and validation AUC per epoch."""
    epochs = [h["epoch"] for h in history]
    fig, ax_loss = plt.subplots(figsize=(7, 4.5))
    ax_loss.plot(epochs, [h["train_loss"] for h in history], color="#1f77b4", marker="o")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("BCE loss", color="#1f77b4")
    aucs = [h["val_auc"] for h in history]
    if any(a is not None for a in aucs):
        ax_auc = ax_loss.twinx()
        ax_auc.plot(epochs, aucs, color="#d62728", marker="s")
        ax_auc.set_ylabel("validation AUC", color="#d62728")
        ax_auc.set_ylim(0.0, 1.02)
    fig.tight_layout()
    fig.savefig(Path(path), dpi=120)
    plt.close(fig)


def save_sensitivity_plot(rows: list[dict], path) -> None:
    """Best validation reward vs margin, one line per p_plus, styled by mode."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    modes = sorted({r["mode"] for r in rows})
    p_values = sorted({r["p_plus"] for r in rows})
    cmap = plt.get_cmap("viridis")
    styles = {mode: style for mode, style in zip(modes, ["-", "--", ":", "-."])}
    for mi, mode in enumerate(modes):
        for pi, p_plus in enumerate(p_values):
            cell = sorted(
                (r for r in rows if r["mode"] == mode and r["p_plus"] == p_plus),
                key=lambda r: r["margin"],
            )
            if not cell:
                continue
            color = cmap(pi / max(1, len(p_values) - 1) * 0.85)
            label = f"p+={p_plus:g}" + (f" ({mode})" if len(modes) > 1 else "")
            ax.plot(
                [r["margin"] for r in cell],
                [r["best_val_r3"] for r in cell],
                marker="o",
                linestyle=styles.get(mode, "-"),
                color=color,
                label=label,
            )
    ax.set_xlabel("margin")
    ax.set_ylabel("best validation reward")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(Path(path), dpi=120)
    plt.close(fig)


def save_metrics_bar(report, path) -> None:
    """Bar chart of the bounded metrics from a report."""
    fields = [("bleu", report.bleu), ("meteor", report.meteor), ("dist_1", report.dist_1), ("dist_2", report.dist_2)]
    if report.maude_esim is not None:
        fields.append(("maude_esim", report.maude_esim))
    names = [f[0] for f in fields]
    values = [f[1] for f in fields]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(names, values, color="#1f77b4")
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("score")
    ax.set_title(f"avg_len={report.avg_len:.2f}  n={report.n_examples}")
    for i, v in enumerate(values):
        ax.text(i, v + 0.01, f"{v:.3f}", ha="center", fontsize=8)
    fig.tight_layout()
    fig.savefig(Path(path), dpi=120)
    plt.close(fig)
