"""Figure rendering for the report paths.

Every figure is written next to its delimited counterpart (loss CSV, report
CSV, similarity CSV). Rendering is deterministic: fixed size/dpi, Agg
backend, and scrubbed PNG metadata so re-runs produce identical bytes.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

_SAVE_KW = {"dpi": 110, "metadata": {"Software": None}}


def render_loss_curve(rows, path) -> None:
    """Loss per optimizer step, one line per stage."""
    fig, ax = plt.subplots(figsize=(6, 3.2))
    stages = sorted({int(r[1]) for r in rows})
    for stage in stages:
        xs = [int(r[0]) for r in rows if int(r[1]) == stage]
        ys = [float(r[2]) for r in rows if int(r[1]) == stage]
        ax.plot(xs, ys, label=f"stage {stage}", linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    if stages:
        ax.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def render_category_accuracy(report, path) -> None:
    """Bar chart of per-category accuracy with the overall average."""
    cats = list(report.per_category)
    accs = [report.per_category[c]["accuracy"] for c in cats]
    fig, ax = plt.subplots(figsize=(6.4, 3.2))
    ax.bar(range(len(cats)), accs, color="#4878cf")
    ax.axhline(report.average_accuracy, color="#d65f5f", linestyle="--",
               label=f"average {report.average_accuracy:.1f}%")
    ax.set_xticks(range(len(cats)))
    ax.set_xticklabels(cats, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 100)
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def render_similarity_summary(summary: dict[str, float], path) -> None:
    """Mean pooled cosine similarity per encoder tap."""
    taps = list(summary)
    vals = [summary[t] for t in taps]
    fig, ax = plt.subplots(figsize=(5.6, 3.0))
    ax.bar(range(len(taps)), vals, color="#6acc65")
    ax.set_xticks(range(len(taps)))
    ax.set_xticklabels(taps, rotation=15, ha="right", fontsize=8)
    ax.set_ylabel("mean cosine similarity")
    ax.set_ylim(-1, 1.05)
    ax.axhline(0.0, color="black", linewidth=0.6)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
