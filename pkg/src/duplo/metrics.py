"""Confusion-matrix metrics: accuracy, per-class and weighted F1, Cohen's
kappa, plus stable text/CSV serialization and multi-split averaging."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MetricsError(ValueError):
    pass


def confusion_matrix(y_true: np.ndarray, y_pred: np.ndarray, num_classes: int) -> np.ndarray:
    """C x C counts; rows are true classes, columns predicted."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.shape != y_pred.shape:
        raise MetricsError("prediction/label length mismatch")
    if y_true.size == 0:
        raise MetricsError("empty evaluation set")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


@dataclass
class MetricsReport:
    accuracy: float
    f1_per_class: np.ndarray
    f1_weighted: float
    kappa: float
    confusion: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.confusion.shape[0]


def report_from_confusion(cm: np.ndarray) -> MetricsReport:
    cm = np.asarray(cm, dtype=np.int64)
    total = cm.sum()
    if total == 0:
        raise MetricsError("empty confusion matrix")
    accuracy = np.trace(cm) / total

    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1).astype(np.float64)      # true counts
    predicted = cm.sum(axis=0).astype(np.float64)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, support, out=np.zeros_like(tp), where=support > 0)
    pr = precision + recall
    f1 = np.divide(2 * precision * recall, pr, out=np.zeros_like(tp), where=pr > 0)
    f1_weighted = float((f1 * support).sum() / support.sum())

    p_o = accuracy
    p_e = float((support * predicted).sum()) / (total * total)
    kappa = 1.0 if p_e == 1.0 else (p_o - p_e) / (1.0 - p_e)
    return MetricsReport(float(accuracy), f1, f1_weighted, float(kappa), cm)


def evaluate_predictions(y_true, y_pred, num_classes: int) -> MetricsReport:
    return report_from_confusion(confusion_matrix(y_true, y_pred, num_classes))


def average_reports(reports: list[MetricsReport]) -> dict[str, tuple[float, float]]:
    """Mean and population std of accuracy, weighted F1, and kappa."""
    if not reports:
        raise MetricsError("no reports to average")
    c = reports[0].num_classes
    if any(r.num_classes != c for r in reports):
        raise MetricsError("reports have inconsistent class counts")
    out = {}
    for key in ("accuracy", "f1_weighted", "kappa"):
        vals = np.array([getattr(r, key) for r in reports], dtype=np.float64)
        out[key] = (float(vals.mean()), float(vals.std()))
    return out


# -- serialization -------------------------------------------------------------


def format_report(report: MetricsReport) -> str:
    lines = [
        f"accuracy: {report.accuracy:.6f}",
        f"fmeasure_weighted: {report.f1_weighted:.6f}",
        f"kappa: {report.kappa:.6f}",
        f"num_classes: {report.num_classes}",
        f"num_samples: {int(report.confusion.sum())}",
        "",
        "class\tsupport\tf1",
    ]
    support = report.confusion.sum(axis=1)
    for i in range(report.num_classes):
        lines.append(f"{i + 1}\t{int(support[i])}\t{report.f1_per_class[i]:.6f}")
    return "\n".join(lines) + "\n"


def confusion_csv(cm: np.ndarray) -> str:
    return "\n".join(",".join(str(int(v)) for v in row) for row in cm) + "\n"
