"""Per-encounter prediction aggregation and the metric suite.

A study's probability is the arithmetic mean of its view probabilities
(p(normal)); the decision is abnormal iff that mean is < 0.5, with the
0.5 boundary pinned to normal. The positive class for every metric is
abnormal; the internal label code (y=1 normal) is mapped here.
Undefined ratios (zero denominators) are reported as None, never 0.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import data as dat
from .autograd import Tensor
from .models import ModelGraph

DECISION_THRESHOLD = 0.5


class MetricsError(ValueError):
    pass


@dataclass
class StudyPrediction:
    study_id: str
    study_type: str
    truth: str                 # "normal" | "abnormal"
    view_probs: list[float]    # p(normal) per view

    @property
    def study_prob(self) -> float:
        return aggregate_study(self.view_probs)

    @property
    def decision(self) -> str:
        return decide(self.study_prob)


def aggregate_study(view_probs: list[float]) -> float:
    if not view_probs:
        raise MetricsError("cannot aggregate an empty view list")
    return float(np.mean(view_probs))


def decide(study_prob: float) -> str:
    """Score is p(normal): abnormal iff < 0.5, the boundary goes to normal."""
    return dat.LABEL_ABNORMAL if study_prob < DECISION_THRESHOLD else dat.LABEL_NORMAL


@dataclass
class ConfusionMatrix:
    """Counts with positive class = abnormal."""
    tp: int = 0
    fn: int = 0
    fp: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fn + self.fp + self.tn


def confusion(predictions: list[StudyPrediction]) -> ConfusionMatrix:
    if not predictions:
        raise MetricsError("no predictions to tally")
    cm = ConfusionMatrix()
    for p in predictions:
        truth_abn = p.truth == dat.LABEL_ABNORMAL
        pred_abn = p.decision == dat.LABEL_ABNORMAL
        if truth_abn and pred_abn:
            cm.tp += 1
        elif truth_abn:
            cm.fn += 1
        elif pred_abn:
            cm.fp += 1
        else:
            cm.tn += 1
    return cm


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


def basic_metrics(cm: ConfusionMatrix) -> dict[str, float | None]:
    """accuracy, precision, recall/sensitivity, specificity, f1; None when undefined."""
    if cm.total == 0:
        raise MetricsError("empty confusion matrix")
    recall = _ratio(cm.tp, cm.tp + cm.fn)
    return {
        "accuracy": (cm.tp + cm.tn) / cm.total,
        "precision": _ratio(cm.tp, cm.tp + cm.fp),
        "recall": recall,
        "sensitivity": recall,
        "specificity": _ratio(cm.tn, cm.tn + cm.fp),
        "f1": _ratio(2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn),
    }


def cohen_kappa(cm: ConfusionMatrix) -> float:
    """(p_o - p_e) / (1 - p_e); degenerate marginals (p_e = 1) give 0."""
    n = cm.total
    if n == 0:
        raise MetricsError("empty confusion matrix")
    p_o = (cm.tp + cm.tn) / n
    p_e = ((cm.tp + cm.fp) * (cm.tp + cm.fn)
           + (cm.fn + cm.tn) * (cm.fp + cm.tn)) / (n * n)
    if p_e == 1.0:
        return 0.0
    return (p_o - p_e) / (1.0 - p_e)


def auroc(scores, truths) -> float:
    """Probability a random abnormal outranks a random normal, ties at 1/2.

    scores are abnormality scores (higher = more abnormal); truths are
    label strings. Equivalent to the trapezoidal ROC area.
    """
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray([t == dat.LABEL_ABNORMAL for t in truths])
    n_pos = int(pos.sum())
    n_neg = pos.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricsError("AUROC needs at least one abnormal and one normal truth")
    # average ranks (midranks for ties) -> Mann-Whitney U
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class MetricsRow:
    study_type: str            # one type, or "overall"
    n: int
    kappa: float
    metrics: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"study_type": self.study_type, "n": self.n, "kappa": self.kappa,
                **{k: self.metrics.get(k) for k in
                   ("precision", "recall", "sensitivity", "specificity",
                    "f1", "auroc", "accuracy")}}


@dataclass
class MetricsReport:
    split: str
    rows: list[MetricsRow]
    overall: MetricsRow
    predictions: list[StudyPrediction]

    def as_dict(self) -> dict:
        return {"split": self.split,
                "rows": [r.as_dict() for r in self.rows],
                "overall": self.overall.as_dict()}

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.as_dict(), indent=indent, sort_keys=True)


def _row_for(study_type: str, preds: list[StudyPrediction]) -> MetricsRow:
    cm = confusion(preds)
    metrics = basic_metrics(cm)
    truths = [p.truth for p in preds]
    try:
        metrics["auroc"] = auroc([1.0 - p.study_prob for p in preds], truths)
    except MetricsError:
        metrics["auroc"] = None
    return MetricsRow(study_type, len(preds), cohen_kappa(cm), metrics)


def report_from_predictions(predictions: list[StudyPrediction],
                            split: str) -> MetricsReport:
    if not predictions:
        raise MetricsError("no predictions")
    types = sorted({p.study_type for p in predictions})
    rows = [_row_for(t, [p for p in predictions if p.study_type == t]) for t in types]
    return MetricsReport(split, rows, _row_for("overall", predictions), predictions)


def predict_views(model: ModelGraph, manifest: dat.DatasetManifest,
                  target_size: tuple[int, int] = (64, 64),
                  batch_size: int = 32) -> list[StudyPrediction]:
    """Per-view inference (rescale+resize only) grouped into studies."""
    by_study: dict[str, StudyPrediction] = {}
    model.set_requires_grad(False)
    for batch in dat.batch_iterator(manifest, batch_size=batch_size,
                                    target_size=target_size):
        probs = model.forward(Tensor(batch.images)).data.reshape(-1)
        for sid, label_code, prob in zip(batch.study_ids, batch.labels, probs):
            if sid not in by_study:
                truth = dat.LABEL_NORMAL if label_code == 1 else dat.LABEL_ABNORMAL
                study_type = sid.split("/", 1)[0]
                by_study[sid] = StudyPrediction(sid, study_type, truth, [])
            by_study[sid].view_probs.append(float(prob))
    return [by_study[k] for k in sorted(by_study)]


def predict_image(model: ModelGraph, image: np.ndarray) -> float:
    """p(normal) for one preprocessed (1,H,W) image; the single inference
    path shared by the CLI and the HTTP service."""
    model.set_requires_grad(False)
    return float(model.forward(Tensor(image[None])).data.reshape(-1)[0])


def evaluate(model: ModelGraph, manifest: dat.DatasetManifest,
             target_size: tuple[int, int] = (64, 64),
             batch_size: int = 32) -> MetricsReport:
    preds = predict_views(model, manifest, target_size, batch_size)
    return report_from_predictions(preds, manifest.split)


# ---------------------------------------------------------------------------
# rendering

def _fmt(x: float | None, digits: int = 4) -> str:
    return "-" if x is None else f"{x:.{digits}f}"


def render_table(report: MetricsReport) -> str:
    """Human-readable table: kappa (precision, recall) plus the full column set."""
    header = (f"{'Study':<10} {'n':>4} {'Kappa (Prec, Rec)':<26} "
              f"{'Spec':>7} {'F1':>7} {'AUROC':>7} {'Acc':>7}")
    lines = [f"Per Encounter Metrics [{report.split}]", header, "-" * len(header)]
    for row in report.rows + [report.overall]:
        m = row.metrics
        kpr = f"{row.kappa:.3f} ({_fmt(m['precision'], 3)}, {_fmt(m['recall'], 3)})"
        lines.append(f"{row.study_type:<10} {row.n:>4} {kpr:<26} "
                     f"{_fmt(m['specificity'], 3):>7} {_fmt(m['f1'], 3):>7} "
                     f"{_fmt(m['auroc'], 3):>7} {_fmt(m['accuracy'], 3):>7}")
    return "\n".join(lines)


def write_predictions_csv(report: MetricsReport, path) -> None:
    """CSV: study_id,study_type,truth,study_prob,decision."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["study_id", "study_type", "truth", "study_prob", "decision"])
        for p in report.predictions:
            writer.writerow([p.study_id, p.study_type, p.truth,
                             f"{p.study_prob:.8f}", p.decision])
