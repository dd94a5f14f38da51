"""Figure rendering for quantization reports and mode evaluations."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_case_figure(artifacts, path) -> None:
    """Histogram of residual channel CASE across all tensors of an artifact."""
    values = np.concatenate([np.asarray(a.report.channel_case, dtype=float)
                             for a in artifacts]) if artifacts else np.zeros(0)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    if values.size:
        ax.hist(values, bins=40, color="#4878cf", edgecolor="white")
    ax.axvline(0.5, color="#d65f5f", linestyle="--", linewidth=1, label="channel bound 0.5")
    ax.set_xlabel("residual channel CASE")
    ax.set_ylabel("channels")
    ax.set_title("Residual channel error after quantization")
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_eval_figure(result, path) -> None:
    """End-to-end and per-layer output MSE, one series per quantization mode."""
    modes = list(result.modes)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))

    end = [result.modes[m]["end_to_end_mse"] for m in modes]
    ax1.bar(range(len(modes)), end, color="#4878cf")
    ax1.set_xticks(range(len(modes)), [m.upper() for m in modes])
    ax1.set_ylabel("output MSE")
    ax1.set_title(f"End-to-end MSE ({result.bit_width}-bit weights)")

    for m in modes:
        per_layer = result.modes[m]["per_layer_mse"]
        ax2.plot(range(len(per_layer)), per_layer, marker="o", label=m.upper())
    ax2.set_xlabel("layer")
    ax2.set_ylabel("isolated layer MSE")
    ax2.set_title("Per-layer MSE")
    ax2.legend(fontsize=8)

    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
