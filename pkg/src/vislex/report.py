"""Figure rendering for run outputs.

Every report path writes delimited data (CSV/TSV) first; these helpers
render matplotlib figures next to it, under a figures/ subdirectory.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _figures_dir(base: Path) -> Path:
    out = Path(base) / "figures"
    out.mkdir(parents=True, exist_ok=True)
    return out


def render_training_figures(run_dir: Path) -> list[Path]:
    """Loss curves and codebook-health plots from metrics.csv."""
    run_dir = Path(run_dir)
    with open(run_dir / "metrics.csv", newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        return []
    epochs = [int(r["epoch"]) for r in rows]
    out_dir = _figures_dir(run_dir)
    written = []

    fig, ax = plt.subplots(figsize=(7, 4.5))
    for key in ("total", "mlm", "mvm", "itm"):
        ax.plot(epochs, [float(r[key]) for r in rows], label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title("pre-training losses")
    ax.legend()
    fig.tight_layout()
    path = out_dir / "loss_curves.png"
    fig.savefig(path, dpi=110)
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(epochs, [float(r["itm_acc"]) for r in rows], label="itm accuracy", color="tab:green")
    ax.plot(epochs, [float(r["util"]) for r in rows], label="codebook utilization", color="tab:blue")
    ax.set_xlabel("epoch")
    ax.set_ylabel("fraction")
    ax.set_ylim(0, 1.05)
    ax2 = ax.twinx()
    ax2.plot(epochs, [float(r["perplexity"]) for r in rows], label="perplexity", color="tab:red")
    ax2.set_ylabel("assignment perplexity")
    lines, labels = ax.get_legend_handles_labels()
    lines2, labels2 = ax2.get_legend_handles_labels()
    ax.legend(lines + lines2, labels + labels2, loc="center right")
    ax.set_title("matching accuracy and codebook health")
    fig.tight_layout()
    path = out_dir / "codebook_health.png"
    fig.savefig(path, dpi=110)
    plt.close(fig)
    written.append(path)
    return written


def render_retrieval_figure(tsv_path: Path, out_dir: Path) -> Path:
    """Bar chart of recall@K from an eval TSV (metric<TAB>value rows)."""
    metrics = {}
    for line in Path(tsv_path).read_text(encoding="utf-8").splitlines():
        name, _, value = line.partition("\t")
        if name != "metric":
            metrics[name] = float(value)
    names = [n for n in metrics if n.startswith(("tr_r@", "ir_r@"))]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(range(len(names)), [metrics[n] for n in names], color="tab:purple")
    ax.set_xticks(range(len(names)), names, rotation=30)
    ax.set_ylim(0, 1.0)
    ax.set_ylabel("recall")
    ax.set_title("retrieval recall@K")
    fig.tight_layout()
    path = _figures_dir(out_dir) / "recall_at_k.png"
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def render_bench_figure(stage_ms: dict[str, float], out_dir: Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    names = list(stage_ms)
    ax.bar(range(len(names)), [stage_ms[n] for n in names], color="tab:orange")
    ax.set_xticks(range(len(names)), names, rotation=15)
    ax.set_ylabel("mean latency (ms)")
    ax.set_title("inference stage timing")
    fig.tight_layout()
    path = _figures_dir(out_dir) / "stage_latency.png"
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def render_vd_montage(patches_by_index: dict[int, list[np.ndarray]], out_dir: Path,
                      max_indices: int = 8, max_patches: int = 12) -> Path | None:
    """Grid of image patches per codebook index, one row per index."""
    shown = [(j, p) for j, p in patches_by_index.items() if p][:max_indices]
    if not shown:
        return None
    rows = len(shown)
    cols = min(max_patches, max(len(p) for _, p in shown))
    fig, axes = plt.subplots(rows, cols, figsize=(cols * 0.9, rows * 1.0), squeeze=False)
    for r, (j, patches) in enumerate(shown):
        for c in range(cols):
            ax = axes[r][c]
            ax.axis("off")
            if c < len(patches):
                ax.imshow(patches[c])
            if c == 0:
                ax.set_title(f"idx {j}", fontsize=7, loc="left")
    fig.tight_layout()
    path = _figures_dir(out_dir) / "index_patches.png"
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path
