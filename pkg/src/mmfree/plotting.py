"""Report figures, rendered off-screen to PNG files."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_loss(rows: list[dict], path: str | Path, window: int = 50, title: str = "") -> Path:
    steps = np.array([r["step"] for r in rows])
    loss = np.array([r["loss"] for r in rows], dtype=float)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, loss, lw=0.6, alpha=0.4, label="loss")
    if loss.size >= window:
        smooth = np.convolve(loss, np.ones(window) / window, mode="valid")
        ax.plot(steps[window - 1:], smooth, lw=1.5, label=f"mean of last {window}")
    ax.set_xlabel("step")
    ax.set_ylabel("cross-entropy (nats)")
    ax.set_title(title or "training loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_loss_curves(curves: dict[str, list[dict]], path: str | Path, window: int = 50) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, rows in curves.items():
        loss = np.array([r["loss"] for r in rows], dtype=float)
        if loss.size >= window:
            smooth = np.convolve(loss, np.ones(window) / window, mode="valid")
            ax.plot(np.arange(window, loss.size + 1), smooth, label=name)
        else:
            ax.plot(np.arange(1, loss.size + 1), loss, label=name)
    ax.set_xlabel("step")
    ax.set_ylabel(f"loss, mean of last {window}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_bench(rows: list[dict], path: str | Path) -> Path:
    fig, (ax_t, ax_m) = plt.subplots(1, 2, figsize=(8, 3.5))
    labels = [f"{r['impl']}\n{r['variant']} d={r['d']}" for r in rows]
    ax_t.bar(labels, [r["wall_ns_median"] / 1e6 for r in rows], color="tab:blue")
    ax_t.set_ylabel("median wall time (ms)")
    ax_m.bar(labels, [r["reads"] + r["writes"] for r in rows], color="tab:orange")
    ax_m.set_ylabel("vector transfers")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_params(reports: list, path: str | Path) -> Path:
    parts = list(reports[0].breakdown)
    fig, ax = plt.subplots(figsize=(6, 4))
    bottom = np.zeros(len(reports))
    names = [r.variant for r in reports]
    for part in parts:
        vals = np.array([r.breakdown[part] / 1e6 for r in reports])
        ax.bar(names, vals, bottom=bottom, label=part)
        bottom += vals
    ax.set_ylabel("parameters (millions)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
