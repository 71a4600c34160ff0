"""Report emission: JSON + prediction CSV + rendered figures.

The eval path writes, next to the delimited outputs, an overall ROC
curve and a per-study-type kappa bar chart as PNG files.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from . import data as dat
from .evaluation import MetricsReport, render_table, write_predictions_csv


def roc_points(scores, truths) -> tuple[np.ndarray, np.ndarray]:
    """(fpr, tpr) swept over score thresholds, positive class = abnormal."""
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray([t == dat.LABEL_ABNORMAL for t in truths])
    order = np.argsort(-scores, kind="stable")
    pos = pos[order]
    tp = np.concatenate([[0], np.cumsum(pos)])
    fp = np.concatenate([[0], np.cumsum(~pos)])
    n_pos = max(int(pos.sum()), 1)
    n_neg = max(int((~pos).sum()), 1)
    return fp / n_neg, tp / n_pos


def render_figures(report: MetricsReport, out_dir, prefix: str = "report") -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    scores = [1.0 - p.study_prob for p in report.predictions]
    truths = [p.truth for p in report.predictions]
    fpr, tpr = roc_points(scores, truths)
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot(fpr, tpr, marker=".", lw=1.5)
    ax.plot([0, 1], [0, 1], ls="--", color="gray", lw=1)
    auc = report.overall.metrics.get("auroc")
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    ax.set_title(f"ROC [{report.split}]" + (f"  AUROC={auc:.3f}" if auc is not None else ""))
    fig.tight_layout()
    roc_path = out_dir / f"{prefix}_roc.png"
    fig.savefig(roc_path, dpi=120)
    plt.close(fig)
    written.append(roc_path)

    fig, ax = plt.subplots(figsize=(7, 4))
    names = [r.study_type for r in report.rows] + ["overall"]
    kappas = [r.kappa for r in report.rows] + [report.overall.kappa]
    colors = ["tab:blue"] * len(report.rows) + ["tab:orange"]
    ax.bar(names, kappas, color=colors)
    ax.axhline(0, color="black", lw=0.8)
    ax.set_ylabel("Cohen kappa")
    ax.set_title(f"Per-encounter kappa [{report.split}]")
    ax.set_ylim(-1, 1)
    plt.setp(ax.get_xticklabels(), rotation=30, ha="right")
    fig.tight_layout()
    kappa_path = out_dir / f"{prefix}_kappa.png"
    fig.savefig(kappa_path, dpi=120)
    plt.close(fig)
    written.append(kappa_path)
    return written


def emit_report(report: MetricsReport, json_path, figures: bool = True) -> list[Path]:
    """Write report JSON, prediction CSV, and figures beside json_path."""
    json_path = Path(json_path)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    json_path.write_text(report.to_json() + "\n", encoding="utf-8")
    stem = json_path.stem
    write_predictions_csv(report, json_path.with_name(f"{stem}_predictions.csv"))
    written = [json_path, json_path.with_name(f"{stem}_predictions.csv")]
    if figures:
        written += render_figures(report, json_path.parent, prefix=stem)
    return written


__all__ = ["roc_points", "render_figures", "emit_report", "render_table"]
