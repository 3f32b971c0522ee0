"""Per-subject event-timeline plots (optional; needs matplotlib)."""

from __future__ import annotations

from pathlib import Path


def write_timeline_plot(result, annotations, duration_s: float, path) -> None:
    """Annotated vs predicted event intervals on a shared time axis."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(10, 2.2))
    for ev in annotations:
        ax.broken_barh([(ev.start_s, ev.duration_s)], (1.1, 0.8), color="tab:green")
    for ev in result.events:
        color = "tab:blue" if ev.source == "svm" else "tab:orange"
        ax.broken_barh([(ev.start_s, ev.duration_s)], (0.1, 0.8), color=color)
    ax.set_xlim(0, duration_s)
    ax.set_ylim(0, 2.1)
    ax.set_yticks([0.5, 1.5])
    ax.set_yticklabels(["predicted", "annotated"])
    ax.set_xlabel("time (s)")
    ax.set_title(
        f"{result.id}: expert {result.expert_severity}, "
        f"predicted {result.predicted_severity} (REI {result.rei:.1f}/h)"
    )
    fig.tight_layout()
    fig.savefig(Path(path), dpi=110)
    plt.close(fig)
