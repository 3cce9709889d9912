"""The three plot kinds: scaling_law, gini_curves, metric_curves."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .csvio import read_columns
from .fit import power_law_fit


def plot_scaling_law(csv_path: str, out_path: str) -> tuple[float, float, float]:
    """Log-log scatter of loss vs params with the fitted power law.

    Returns and prints the annotated (a, b, r2); raises on fewer than 3 rows.
    """
    cols = read_columns(csv_path, required=["params", "loss"])
    sizes, losses = np.asarray(cols["params"]), np.asarray(cols["loss"])
    a, b, r2 = power_law_fit(sizes, losses)

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.scatter(sizes, losses, color="tab:blue", zorder=3, label="observed")
    grid = np.logspace(np.log10(sizes.min()), np.log10(sizes.max()), 64)
    ax.plot(grid, a * grid ** (-b), color="tab:red",
            label=f"fit: a={a:.6f}, b={b:.6f}, $R^2$={r2:.6f}")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("trainable parameters")
    ax.set_ylabel("loss")
    ax.set_title("loss vs model size (power-law fit)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    print(f"a={a:.6f} b={b:.6f} r2={r2:.6f}")
    return a, b, r2


def plot_gini(csv_path: str, out_path: str) -> list[str]:
    """One line per gini_layer_* column over steps; y clamped to [0, 1]."""
    cols = read_columns(csv_path, required=["step"])
    layer_cols = sorted(
        (c for c in cols if c.startswith("gini_layer_")),
        key=lambda c: int(c.rsplit("_", 1)[1]),
    )
    if not layer_cols:
        raise ValueError(f"{csv_path}: no gini_layer_* columns")
    for c in layer_cols:
        vals = np.asarray(cols[c])
        if np.isnan(vals).any() or (vals < 0).any() or (vals > 1).any():
            raise ValueError(f"{csv_path}: column {c} has values outside [0, 1]")

    fig, ax = plt.subplots(figsize=(6, 4))
    for c in layer_cols:
        ax.plot(cols["step"], cols[c], label=c.replace("gini_layer_", "layer "))
    ax.set_ylim(0.0, 1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("Gini coefficient of expert usage")
    ax.set_title("MoE load balance over training")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return layer_cols


def plot_metrics(csv_path: str, out_path: str, logy: bool = False) -> list[str]:
    """Training curves: losses on the left axis, hitrate/ndcg on the right."""
    cols = read_columns(csv_path, required=["step", "L_total"])
    loss_cols = [c for c in ("L_con", "L_c1", "L_c2", "L_total") if c in cols]
    diag_cols = [c for c in ("hitrate", "ndcg") if c in cols]

    fig, ax = plt.subplots(figsize=(7, 4))
    for c in loss_cols:
        ax.plot(cols["step"], cols[c], label=c)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    if diag_cols:
        ax2 = ax.twinx()
        for c in diag_cols:
            ax2.plot(cols["step"], cols[c], linestyle="--", alpha=0.6, label=c)
        ax2.set_ylabel("in-batch metric")
        ax2.set_ylim(0.0, 1.0)
        lines, labels = ax.get_legend_handles_labels()
        lines2, labels2 = ax2.get_legend_handles_labels()
        ax.legend(lines + lines2, labels + labels2, fontsize=8)
    else:
        ax.legend(fontsize=8)
    ax.set_title("training metrics")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return loss_cols + diag_cols
