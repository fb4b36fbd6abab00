"""Accuracy, macro F1 and confusion matrices over integer class labels."""
import csv
import io
from dataclasses import dataclass

import numpy as np

from .linalg import ContractError


@dataclass
class MetricsReport:
    accuracy_percent: float
    f1_macro: float
    confusion: np.ndarray  # rows = true class, cols = predicted

    @property
    def n_samples(self):
        return int(self.confusion.sum())


def _labels(pred, truth):
    pred = np.asarray(pred, dtype=np.int64).ravel()
    truth = np.asarray(truth, dtype=np.int64).ravel()
    if pred.shape != truth.shape:
        raise ContractError(f"{pred.size} predictions for {truth.size} labels")
    return pred, truth


def accuracy(pred, truth):
    pred, truth = _labels(pred, truth)
    if pred.size == 0:
        raise ContractError("accuracy of an empty prediction set")
    return 100.0 * np.count_nonzero(pred == truth) / pred.size


def confusion_matrix(pred, truth, n_classes):
    pred, truth = _labels(pred, truth)
    for name, v in (("predicted", pred), ("true", truth)):
        if v.size and (v.min() < 0 or v.max() >= n_classes):
            raise ContractError(f"{name} label outside [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (truth, pred), 1)
    return cm


def f1_from_confusion(cm):
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    predicted = cm.sum(axis=0)
    actual = cm.sum(axis=1)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, actual, out=np.zeros_like(tp), where=actual > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    return float(f1.mean()) if f1.size else 0.0


def f1_macro(pred, truth, n_classes):
    """Unweighted mean of per-class F1; a class with p + r == 0 scores 0."""
    return f1_from_confusion(confusion_matrix(pred, truth, n_classes))


def evaluate(pred, truth, n_classes):
    cm = confusion_matrix(pred, truth, n_classes)
    return MetricsReport(accuracy(pred, truth), f1_from_confusion(cm), cm)


def row_normalized(cm):
    cm = np.asarray(cm, dtype=np.float64)
    totals = cm.sum(axis=1, keepdims=True)
    return np.divide(cm, totals, out=np.zeros_like(cm), where=totals > 0)


def report_csv(report, class_names=None):
    """Scalar block, then confusion counts, then row-normalised rates (4 decimals)."""
    c = report.confusion.shape[0]
    names = list(class_names) if class_names else [str(k) for k in range(c)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "value"])
    w.writerow(["accuracy_percent", f"{report.accuracy_percent:.4f}"])
    w.writerow(["f1_macro", f"{report.f1_macro:.4f}"])
    w.writerow(["n_samples", report.n_samples])
    w.writerow([])
    w.writerow(["confusion_counts"] + names)
    for name, row in zip(names, report.confusion):
        w.writerow([name] + [int(v) for v in row])
    w.writerow([])
    w.writerow(["confusion_rates"] + names)
    for name, row in zip(names, row_normalized(report.confusion)):
        w.writerow([name] + [f"{v:.4f}" for v in row])
    return buf.getvalue()


def write_report(path, report, class_names=None):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(report_csv(report, class_names))
