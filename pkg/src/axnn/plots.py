"""Figure emission for exploration reports.

All figures are written as standalone SVG files and are byte
deterministic for fixed input: the SVG hash salt is pinned and no
timestamp metadata is embedded.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

matplotlib.rcParams["svg.hashsalt"] = "axnn"


def scatter_accuracy_energy(
    points: list[tuple[float, float]],
    front: list[tuple[float, float]],
    out_path: str | Path,
    title: str = "Accuracy loss vs energy",
) -> None:
    """Scatter of (energy, accuracy_loss) with the Pareto front marked.

    points and front hold (accuracy_loss, energy) pairs; front members
    are drawn on top and connected by a polyline in energy order.
    """
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    if points:
        losses, energies = zip(*points)
        ax.scatter(energies, losses, s=18, c="#7f9fc4", alpha=0.8,
                   edgecolors="none", label="evaluated", zorder=2)
    if front:
        fr = sorted(front, key=lambda p: p[1])
        losses, energies = zip(*fr)
        ax.plot(energies, losses, "-o", color="#c23b22", markersize=5,
                linewidth=1.4, label="Pareto front", zorder=3)
    ax.set_xlabel("total energy (normalized multiplier units)")
    ax.set_ylabel("accuracy loss vs baseline")
    ax.set_title(title)
    ax.grid(True, linewidth=0.4, alpha=0.5)
    if points or front:
        ax.legend(loc="best")
    fig.tight_layout()
    fig.savefig(str(out_path), format="svg", metadata={"Date": None})
    plt.close(fig)


def sweep_curve(
    rows: list[tuple[int, float]],
    out_path: str | Path,
    mode: str,
    mult_id: str,
) -> None:
    """Accuracy vs number/index of approximated layers (layer 0 = baseline)."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    xs = [m for m, _ in rows]
    ys = [a for _, a in rows]
    ax.plot(xs, ys, "-o", color="#2a6f4e", markersize=5)
    ax.set_xlabel("layer index" if mode == "single" else "layers 1..m approximated")
    ax.set_ylabel("top-1 accuracy")
    ax.set_title(f"{mode} sweep, {mult_id}")
    ax.set_xticks(xs)
    ax.grid(True, linewidth=0.4, alpha=0.5)
    fig.tight_layout()
    fig.savefig(str(out_path), format="svg", metadata={"Date": None})
    plt.close(fig)
