"""Per-class precision/recall/F1, macro averages and confusion matrices."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cloud import Label

N_CLASSES = 3
MOVING_CLASSES = (Label.VEHICLE, Label.PEDESTRIAN)


@dataclass(frozen=True)
class ConfusionMatrix:
    """3x3 counts; rows are ground truth, columns predictions."""

    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.shape != (N_CLASSES, N_CLASSES) or (counts < 0).any():
            raise ValueError("confusion matrix must be 3x3 with non-negative counts")
        object.__setattr__(self, "counts", counts)

    def normalized(self) -> np.ndarray:
        """Row fractions relative to each class's support; empty rows stay zero."""
        support = self.counts.sum(axis=1, keepdims=True)
        out = np.zeros((N_CLASSES, N_CLASSES), dtype=np.float64)
        np.divide(self.counts, support, out=out, where=support > 0)
        return out

    def support(self, cls: Label) -> int:
        return int(self.counts[int(cls)].sum())


def confusion(labels_true, labels_pred) -> ConfusionMatrix:
    true = np.asarray(labels_true, dtype=np.int64)
    pred = np.asarray(labels_pred, dtype=np.int64)
    if true.shape != pred.shape:
        raise ValueError("label arrays must align")
    counts = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    np.add.at(counts, (true, pred), 1)
    return ConfusionMatrix(counts)


def precision_recall_f1(cm: ConfusionMatrix, cls: Label) -> tuple[float, float, float]:
    """Class precision, recall and their harmonic mean; 0/0 is defined as 0."""
    c = int(cls)
    tp = float(cm.counts[c, c])
    fp = float(cm.counts[:, c].sum() - tp)
    fn = float(cm.counts[c, :].sum() - tp)
    prec = tp / (tp + fp) if tp + fp > 0 else 0.0
    rec = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2.0 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
    return prec, rec, f1


def macro_average(vehicle: tuple[float, float, float],
                  pedestrian: tuple[float, float, float]) -> tuple[float, float, float]:
    """Unweighted mean of each statistic over the two moving classes.

    The averaged F1 is the mean of the class F1 values, not the harmonic
    mean of the averaged precision/recall.
    """
    return tuple((v + p) / 2.0 for v, p in zip(vehicle, pedestrian))


@dataclass(frozen=True)
class Metrics:
    """Per-class triples plus the moving-class macro average."""

    per_class: dict
    macro: tuple[float, float, float]

    @property
    def macro_f1(self) -> float:
        return self.macro[2]

    def row(self, cls: Label) -> tuple[float, float, float]:
        return self.per_class[Label(cls)]


def metrics_from_confusion(cm: ConfusionMatrix) -> Metrics:
    per_class = {cls: precision_recall_f1(cm, cls) for cls in Label}
    macro = macro_average(per_class[Label.VEHICLE], per_class[Label.PEDESTRIAN])
    return Metrics(per_class=per_class, macro=macro)


def evaluate_predictions(labels_true, labels_pred) -> tuple[Metrics, ConfusionMatrix]:
    cm = confusion(labels_true, labels_pred)
    return metrics_from_confusion(cm), cm


def format_metrics_table(rows: dict[str, Metrics]) -> str:
    """Fixed-width report with one line per configuration."""
    header = (f"{'method':<16}"
              f"{'veh_prec':>9}{'veh_rec':>9}{'veh_f1':>9}"
              f"{'ped_prec':>9}{'ped_rec':>9}{'ped_f1':>9}"
              f"{'avg_prec':>9}{'avg_rec':>9}{'avg_f1':>9}")
    lines = [header]
    for name, m in rows.items():
        veh = m.row(Label.VEHICLE)
        ped = m.row(Label.PEDESTRIAN)
        cells = [*veh, *ped, *m.macro]
        lines.append(f"{name:<16}" + "".join(f"{100.0 * v:>9.2f}" for v in cells))
    return "\n".join(lines)
