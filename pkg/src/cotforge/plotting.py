"""Figure rendering for report outputs.

matplotlib is imported lazily with the Agg backend so the CLI stays fast and
headless-safe; figures land next to the delimited report files.
"""

from __future__ import annotations

from pathlib import Path


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def save_budget_curve(points, path: str | Path, title: str = "Accuracy vs reasoning budget") -> None:
    """Line plot of pass@1 accuracy against the reasoning-token budget."""
    plt = _pyplot()
    budgets = [p.budget for p in points]
    accuracies = [p.accuracy for p in points]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(budgets, accuracies, marker="o")
    ax.set_xscale("log", base=2)
    ax.set_xticks(budgets)
    ax.set_xticklabels([str(b) for b in budgets])
    ax.set_xlabel("reasoning budget (tokens)")
    ax.set_ylabel("pass@1 accuracy")
    ax.set_ylim(-0.02, 1.02)
    ax.grid(True, alpha=0.3)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_stats_figure(stats, path: str | Path) -> None:
    """Grouped bars of average token counts per source."""
    plt = _pyplot()
    rows = stats.rows
    if not rows:
        rows = [stats.aggregate]
    names = [r.name for r in rows]
    kinds = ("avg_user", "avg_assistant", "avg_reasoning")
    fig, ax = plt.subplots(figsize=(max(6, 1.5 * len(names)), 4))
    width = 0.25
    for offset, kind in enumerate(kinds):
        values = [getattr(r, kind) for r in rows]
        positions = [i + (offset - 1) * width for i in range(len(names))]
        ax.bar(positions, values, width=width, label=kind.removeprefix("avg_"))
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=20, ha="right")
    ax.set_ylabel("avg tokens / sample")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
