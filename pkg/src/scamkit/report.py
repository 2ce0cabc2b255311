"""Evaluation report rendering: figures written next to the metrics CSV."""

from __future__ import annotations

import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .pgmio import read_f64

_PNG_META = {"Software": "scamkit"}


def _save(fig, path: Path) -> None:
    os.makedirs(path.parent, exist_ok=True)
    fig.savefig(path, dpi=110, metadata=_PNG_META)
    plt.close(fig)


def render_figures(cfg, paths, corpus, report) -> list[str]:
    """Metric distributions and example prediction panels as PNG files."""
    fig_dir = paths.report / "figures"
    out = []

    names = ["auc_j", "s_auc", "nss", "cc", "sim"]
    values = {n: [getattr(f, n) for f in report.frames] for n in names}
    means = report.means()
    fig, axes = plt.subplots(1, 5, figsize=(16, 3))
    for ax, name in zip(axes, names):
        ax.hist(values[name], bins=24, color="#4878cf", edgecolor="white")
        ax.axvline(means[name], color="#d1495b", linewidth=1.5)
        ax.set_title(f"{name}  mean={means[name]:.3f}", fontsize=10)
        ax.tick_params(labelsize=8)
    fig.suptitle("per-frame saliency metrics (held-out split)", fontsize=11)
    fig.tight_layout()
    hist_path = fig_dir / "metrics_hist.png"
    _save(fig, hist_path)
    out.append(str(hist_path))

    # example panels: frame / ground-truth density / prediction
    pred_root = paths.pred / cfg.fuse
    picks = [(f.seq_id, f.frame) for f in report.frames][:: max(1, len(report.frames) // 4)][:4]
    if picks:
        hw = cfg.frame_hw
        fig, axes = plt.subplots(len(picks), 3, figsize=(7.5, 2.5 * len(picks)),
                                 squeeze=False)
        for row, (sid, t) in enumerate(picks):
            frame = corpus.frame(sid, t)
            cf, _ = corpus.ground_truth(sid, t)
            pred = read_f64(str(pred_root / f"{sid}_{t:04d}") + ".f64", (hw, hw))
            axes[row][0].imshow(frame)
            axes[row][0].set_title(f"{sid} frame {t}", fontsize=9)
            axes[row][1].imshow(cf, cmap="magma", vmin=0, vmax=1)
            axes[row][1].set_title("ground truth", fontsize=9)
            axes[row][2].imshow(pred, cmap="magma", vmin=0, vmax=1)
            axes[row][2].set_title(f"prediction ({cfg.fuse})", fontsize=9)
            for ax in axes[row]:
                ax.set_xticks([])
                ax.set_yticks([])
        fig.tight_layout()
        panel_path = fig_dir / "examples.png"
        _save(fig, panel_path)
        out.append(str(panel_path))
    return out
