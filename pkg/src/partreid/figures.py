"""Report figures rendered to files (headless backend).

Each report path pairs its delimited output with one figure: training
writes a loss curve next to the loss CSV, evaluation an AP histogram
next to the report files, and the sketch check an error-vs-dimension
curve next to its table.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def render_loss_curve(rows: list[dict], path) -> Path:
    """Plot per-step loss components from training rows."""
    path = Path(path)
    steps = [r["step"] for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, [r["total"] for r in rows], label="total", linewidth=1.5)
    if any(r["triplet"] != r["total"] for r in rows):
        ax.plot(steps, [r["triplet"] for r in rows], label="triplet", linewidth=1.0)
    tap_keys = [k for k in rows[0] if k.startswith("tap_")]
    for key in tap_keys:
        ax.plot(steps, [r[key] for r in rows], label=key, linewidth=1.0)
    if any(r["identity"] != 0.0 for r in rows):
        ax.plot(steps, [r["identity"] for r in rows], label="identity", linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title("training loss")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_ap_histogram(per_query_aps: list[float], map_score: float, path) -> Path:
    """Histogram of per-query average precision."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(per_query_aps, bins=20, range=(0.0, 1.0), edgecolor="black", alpha=0.8)
    ax.axvline(map_score, color="red", linestyle="--", label=f"mAP = {map_score:.3f}")
    ax.set_xlabel("average precision")
    ax.set_ylabel("queries")
    ax.set_title("per-query AP")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_sketch_error_curve(dims: list[int], medians: list[float], path) -> Path:
    """Median relative error of compact vs exact pooling across dimensions."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(dims, medians, marker="o")
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("sketch dimension d")
    ax.set_ylabel("median relative error")
    ax.set_title("compact pooling error vs dimension")
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
