"""Classification metrics computed from confidence matrices."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .confidence import ConfidenceMatrix


class EmptyEvaluation(ValueError):
    pass


class MisalignedIds(ValueError):
    pass


class UnknownLabel(ValueError):
    pass


def confusion_matrix(predictions, labels, n_classes: int) -> np.ndarray:
    """``C[i, j]`` = number of samples with truth ``i`` predicted as ``j``."""
    pred = np.asarray(predictions, dtype=np.int64)
    true = np.asarray(labels, dtype=np.int64)
    if pred.shape != true.shape:
        raise MisalignedIds("predictions and labels differ in length")
    for arr in (pred, true):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise UnknownLabel("class index outside the catalog")
    return np.bincount(true * n_classes + pred, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def ranked_classes(probs: np.ndarray) -> np.ndarray:
    """Class indices per row by descending confidence; ties keep the lower index first."""
    return np.argsort(-probs, axis=1, kind="stable")


def top_k_hits(probs: np.ndarray, true: np.ndarray, k: int) -> np.ndarray:
    return np.any(ranked_classes(probs)[:, :k] == true[:, None], axis=1)


@dataclass(frozen=True)
class ClassMetrics:
    name: str
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class MetricsReport:
    accuracy: float
    per_class: list[ClassMetrics]
    macro_f1: float
    macro_recall: float
    top_k: dict[int, tuple[float, float]]
    confusion: np.ndarray
    classes: tuple[str, ...]
    n_samples: int
    exclusions: tuple[str, ...] = ()
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        doc = {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "macro_recall": self.macro_recall,
            "n_samples": self.n_samples,
            "classes": list(self.classes),
            "exclusions": list(self.exclusions),
            "per_class": [vars(c) for c in self.per_class],
            "top_k": {str(k): {"accuracy": a, "macro_recall": r} for k, (a, r) in sorted(self.top_k.items())},
            "confusion": self.confusion.tolist(),
        }
        if self.provenance:
            doc["provenance"] = self.provenance
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def per_class_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "precision", "recall", "f1", "support"])
        for c in self.per_class:
            w.writerow([c.name, repr(c.precision), repr(c.recall), repr(c.f1), c.support])
        return buf.getvalue()

    def save(self, json_path, csv_path=None) -> None:
        Path(json_path).write_text(self.to_json(), encoding="utf-8")
        if csv_path is not None:
            Path(csv_path).write_text(self.per_class_csv(), encoding="utf-8")


def _per_class(conf: np.ndarray, names: Sequence[str]) -> list[ClassMetrics]:
    out = []
    for i, name in enumerate(names):
        tp = int(conf[i, i])
        support = int(conf[i].sum())
        predicted = int(conf[:, i].sum())
        recall = tp / support if support else 0.0
        precision = tp / predicted if predicted else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        out.append(ClassMetrics(name, precision, recall, f1, support))
    return out


def evaluate(confidences: ConfidenceMatrix, labels: Sequence[str] | None = None,
             k_list: Iterable[int] = (1,), exclude: Iterable[str] = ()) -> MetricsReport:
    """Accuracy, per-class P/R/F1, macro averages, top-k and confusion counts.

    Prediction is the arg-max (lowest class index on ties). Macro averages run
    over classes with support in the evaluated samples. ``exclude`` drops
    samples whose *true* label is in the set; predictions into excluded
    classes still count as errors.
    """
    if labels is not None:
        if len(labels) != len(confidences.ids):
            raise MisalignedIds("labels and confidence rows differ in length")
        confidences = ConfidenceMatrix(confidences.ids, confidences.classes, confidences.probs,
                                       tuple(labels), confidences.split)
    try:
        true = confidences.label_indices()
    except ValueError as exc:
        raise UnknownLabel(str(exc)) from None
    n_c = confidences.n_classes
    exclude = tuple(sorted(set(exclude)))
    unknown = [e for e in exclude if e not in confidences.classes]
    if unknown:
        raise UnknownLabel(f"excluded classes not in catalog: {unknown}")
    excluded_idx = [confidences.classes.index(e) for e in exclude]
    keep = ~np.isin(true, excluded_idx)
    probs = confidences.probs[keep]
    true = true[keep]
    if len(true) == 0:
        raise EmptyEvaluation("no samples left to evaluate")

    pred = np.argmax(probs, axis=1)
    conf = confusion_matrix(pred, true, n_c)
    per_class = _per_class(conf, confidences.classes)
    present = [c for c in per_class if c.support > 0]
    accuracy = float(np.trace(conf) / conf.sum())

    top_k = {}
    for k in sorted(set(int(k) for k in k_list)):
        if not 1 <= k <= n_c:
            raise ValueError(f"k={k} outside [1, {n_c}]")
        hits = top_k_hits(probs, true, k)
        recalls = [float(hits[true == i].mean()) for i in range(n_c) if np.any(true == i)]
        top_k[k] = (float(hits.mean()), float(np.mean(recalls)))

    return MetricsReport(
        accuracy=accuracy,
        per_class=per_class,
        macro_f1=float(np.mean([c.f1 for c in present])),
        macro_recall=float(np.mean([c.recall for c in present])),
        top_k=top_k,
        confusion=conf,
        classes=confidences.classes,
        n_samples=int(len(true)),
        exclusions=exclude,
    )


def macro_f1(confidences: ConfidenceMatrix) -> float:
    return evaluate(confidences).macro_f1


def accuracy(confidences: ConfidenceMatrix) -> float:
    return evaluate(confidences).accuracy
