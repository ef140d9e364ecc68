"""Classification metrics shared by training, attack and defense flows."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyDatasetError
from .model import DetectorModel, EncodedSample, forward_dataset

# Reference results reported for the original full-scale corpus (real
# malware + clean Windows binaries, not redistributable).  The desk corpus
# is a synthetic stand-in, so these are printed for context only and are
# not reproduction targets.
REFERENCE_FIGURES = {
    "clean_test_accuracy": 0.925,
    "attack_misclassification_rate": 0.239,
    "adversarial_training_misclassification_rate": 0.112,
    "feature_reduction_misclassification_rate": 0.215,
}


@dataclass
class MetricsReport:
    """Binary-classification outcome with malware as the positive class.

    Precision/recall are defined as 0 when their denominator is 0; the
    ``*_defined`` flags record whether that happened.
    """

    n: int
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    precision: float
    recall: float
    f1: float
    precision_defined: bool
    recall_defined: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def metrics_from_predictions(labels: np.ndarray, preds: np.ndarray) -> MetricsReport:
    labels = np.asarray(labels, dtype=np.int64)
    preds = np.asarray(preds, dtype=np.int64)
    if labels.size == 0:
        raise EmptyDatasetError()
    tp = int(((preds == 1) & (labels == 1)).sum())
    fp = int(((preds == 1) & (labels == 0)).sum())
    tn = int(((preds == 0) & (labels == 0)).sum())
    fn = int(((preds == 0) & (labels == 1)).sum())
    n = labels.size
    precision_defined = (tp + fp) > 0
    recall_defined = (tp + fn) > 0
    precision = tp / (tp + fp) if precision_defined else 0.0
    recall = tp / (tp + fn) if recall_defined else 0.0
    f1 = 2 * precision * recall / (precision + recall) if (precision + recall) > 0 else 0.0
    return MetricsReport(
        n=n, tp=tp, fp=fp, tn=tn, fn=fn,
        accuracy=(tp + tn) / n,
        precision=precision, recall=recall, f1=f1,
        precision_defined=precision_defined, recall_defined=recall_defined,
    )


def evaluate(model: DetectorModel, dataset: list[EncodedSample]) -> MetricsReport:
    """Score a dataset with the fixed decision threshold p_malware >= 0.5."""
    if not dataset:
        raise EmptyDatasetError()
    probs = forward_dataset(model, dataset)
    labels = np.array([s.label for s in dataset])
    return metrics_from_predictions(labels, (probs >= 0.5).astype(np.int64))


def render_table(report: MetricsReport) -> str:
    rows = [
        ("samples", f"{report.n}"),
        ("accuracy", f"{report.accuracy:.4f}"),
        ("precision", f"{report.precision:.4f}" + ("" if report.precision_defined else " (undefined -> 0)")),
        ("recall", f"{report.recall:.4f}" + ("" if report.recall_defined else " (undefined -> 0)")),
        ("f1", f"{report.f1:.4f}"),
        ("tp/fp/tn/fn", f"{report.tp}/{report.fp}/{report.tn}/{report.fn}"),
    ]
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)
