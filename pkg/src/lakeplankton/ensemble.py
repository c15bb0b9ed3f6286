"""Average and stacked ensembles over confidence matrices."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .confidence import ConfidenceMatrix, MisalignedMembers, align, shared_labels
from .metrics import macro_f1

DEFAULT_LAMBDA = 1e-3
DEFAULT_ITERATIONS = 2000
DEFAULT_BEST_N = 6


class DegenerateLabels(ValueError):
    pass


class SplitLeak(ValueError):
    pass


def ensemble_average(members: Sequence[ConfidenceMatrix]) -> ConfidenceMatrix:
    """Elementwise mean of aligned member confidences; every member counts
    equally. Output rows follow the first member's id order."""
    members = align(members)
    ref = members[0]
    stacked = np.stack([m.probs for m in members])
    # sort along the member axis so the sum is order independent bit for bit
    probs = np.sort(stacked, axis=0).sum(axis=0) / len(members)
    return ConfidenceMatrix(ref.ids, ref.classes, probs, shared_labels(members), ref.split)


def _meta_features(members: Sequence[ConfidenceMatrix]) -> np.ndarray:
    x = np.concatenate([m.probs for m in members], axis=1)
    return np.hstack([x, np.ones((x.shape[0], 1))])


@dataclass
class StackModel:
    """Multinomial logistic regression over concatenated member confidences.

    ``weights`` has shape ``(n_members * n_classes + 1, n_classes)``; the last
    row is the bias.
    """

    weights: np.ndarray
    classes: tuple[str, ...]
    n_members: int
    lam: float = DEFAULT_LAMBDA
    iterations: int = DEFAULT_ITERATIONS
    fit_split: str = "val"
    final_loss: float = float("nan")

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "classes": list(self.classes),
            "n_members": self.n_members,
            "lambda": self.lam,
            "iterations": self.iterations,
            "fit_split": self.fit_split,
            "final_loss": self.final_loss,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "StackModel":
        return cls(np.array(doc["weights"], dtype=np.float64), tuple(doc["classes"]),
                   int(doc["n_members"]), float(doc["lambda"]), int(doc["iterations"]),
                   doc["fit_split"], float(doc["final_loss"]))


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def fit_stack(members: Sequence[ConfidenceMatrix], labels: Sequence[str] | None = None,
              lam: float = DEFAULT_LAMBDA, iterations: int = DEFAULT_ITERATIONS,
              seed: int = 0, split: str | None = None) -> StackModel:
    """Fit the stacker on held-out (validation) confidences.

    Objective: mean cross-entropy + ``lam / 2 * ||W||^2`` (bias included),
    minimised by full-batch gradient descent from ``W = 0`` with step
    ``1 / L``, ``L`` an upper bound on the gradient's Lipschitz constant.
    Starting from zero makes the fit deterministic; ``seed`` is recorded for
    interface symmetry only.

    Members tagged as the test split are refused.
    """
    members = align(members)
    split = split or members[0].split or "val"
    if split == "test" or any(m.split == "test" for m in members):
        raise SplitLeak("refusing to fit the stacker on test-split confidences")
    ref = members[0]
    if labels is None:
        labels = shared_labels(members)
        if labels is None:
            raise ValueError("true labels are required to fit the stacker")
    elif len(labels) != len(ref.ids):
        raise MisalignedMembers("labels and members differ in length")
    lookup = {c: i for i, c in enumerate(ref.classes)}
    y = np.array([lookup[l] for l in labels], dtype=np.int64)
    if len(np.unique(y)) < 2:
        raise DegenerateLabels("stacking needs at least two distinct labels")

    x = _meta_features(members)
    n, d = x.shape
    k = len(ref.classes)
    onehot = np.zeros((n, k))
    onehot[np.arange(n), y] = 1.0
    # Hessian of mean softmax-CE is bounded by 0.5 * X^T X / n (Böhning)
    lipschitz = 0.5 * np.linalg.norm(x, 2) ** 2 / n + lam
    step = 1.0 / lipschitz
    w = np.zeros((d, k))
    for _ in range(iterations):
        p = _softmax(x @ w)
        grad = x.T @ (p - onehot) / n + lam * w
        w -= step * grad
    p = np.clip(_softmax(x @ w), 1e-12, 1.0)
    loss = float(-np.mean(np.log(p[np.arange(n), y])) + 0.5 * lam * np.sum(w * w))
    return StackModel(w, ref.classes, len(members), lam, iterations, split, loss)


def apply_stack(model: StackModel, members: Sequence[ConfidenceMatrix]) -> ConfidenceMatrix:
    members = align(members)
    ref = members[0]
    if len(members) != model.n_members:
        raise MisalignedMembers(f"stacker expects {model.n_members} members, got {len(members)}")
    if ref.classes != model.classes:
        raise MisalignedMembers("class order differs from fit time")
    probs = _softmax(_meta_features(members) @ model.weights)
    return ConfidenceMatrix(ref.ids, ref.classes, probs, shared_labels(members), ref.split)


def select_best_n(members: Mapping[str, ConfidenceMatrix], n: int = DEFAULT_BEST_N,
                  labels: Sequence[str] | None = None) -> list[str]:
    """Member ids ranked by validation macro-F1 (descending, ties by id), top ``n``."""
    if n > len(members):
        raise ValueError(f"asked for {n} of {len(members)} members")
    scored = []
    for mid, m in members.items():
        cm = m if labels is None else ConfidenceMatrix(m.ids, m.classes, m.probs, tuple(labels), m.split)
        scored.append((-macro_f1(cm), mid))
    scored.sort()
    return [mid for _, mid in scored[:n]]


@dataclass
class EnsembleSpec:
    members: list[str]
    method: str = "average"
    stack: StackModel | None = None
    selection: dict = field(default_factory=lambda: {"kind": "all"})

    def __post_init__(self):
        if not self.members:
            raise ValueError("an ensemble needs at least one member")
        if self.method not in ("average", "stack"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.method == "stack" and self.stack is None:
            raise ValueError("stack method requires a fitted StackModel")

    def to_dict(self) -> dict:
        return {
            "members": list(self.members),
            "method": self.method,
            "stack": self.stack.to_dict() if self.stack else None,
            "selection": self.selection,
        }

    def save(self, path, provenance: dict | None = None) -> None:
        doc = self.to_dict()
        if provenance:
            doc["provenance"] = provenance
        Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "EnsembleSpec":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        stack = StackModel.from_dict(doc["stack"]) if doc.get("stack") else None
        return cls(doc["members"], doc["method"], stack, doc.get("selection", {"kind": "all"}))

    def combine(self, members: Mapping[str, ConfidenceMatrix]) -> ConfidenceMatrix:
        chosen = [members[m] for m in self.members]
        if self.method == "average":
            return ensemble_average(chosen)
        return apply_stack(self.stack, chosen)
