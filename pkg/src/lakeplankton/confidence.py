"""Per-sample class-probability matrices and their CSV exchange format.

The CSV layout is ``id,true_label,<class names in catalog order>`` with one
probability row per sample; ``true_label`` may be empty. Lines starting with
``#`` before the header carry ``key=value`` metadata (``split``, run hash)
and are optional, so files produced by other tools load unchanged.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

ROW_SUM_TOL = 1e-6


class MisalignedMembers(ValueError):
    pass


@dataclass(frozen=True)
class ConfidenceMatrix:
    ids: tuple[str, ...]
    classes: tuple[str, ...]
    probs: np.ndarray
    labels: tuple[str, ...] | None = None
    split: str | None = None

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "classes", tuple(self.classes))
        if self.labels is not None:
            object.__setattr__(self, "labels", tuple(self.labels))
        if probs.shape != (len(self.ids), len(self.classes)):
            raise ValueError(f"probs shape {probs.shape} does not match "
                             f"{len(self.ids)} ids x {len(self.classes)} classes")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("duplicate sample ids")
        if self.labels is not None and len(self.labels) != len(self.ids):
            raise ValueError("labels and ids differ in length")
        if probs.size:
            if not np.all(np.isfinite(probs)) or probs.min() < 0 or probs.max() > 1:
                raise ValueError("probabilities must lie in [0, 1]")
            if np.max(np.abs(probs.sum(axis=1) - 1.0)) > ROW_SUM_TOL:
                raise ValueError("probability rows must sum to 1")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def predictions(self) -> np.ndarray:
        # np.argmax returns the first maximum: ties go to the lowest index
        return np.argmax(self.probs, axis=1)

    def label_indices(self) -> np.ndarray:
        if self.labels is None:
            raise ValueError("confidence matrix carries no true labels")
        lookup = {c: i for i, c in enumerate(self.classes)}
        try:
            return np.array([lookup[l] for l in self.labels], dtype=np.int64)
        except KeyError as exc:
            raise ValueError(f"label {exc.args[0]!r} is not a known class") from None

    def reorder(self, ids: Sequence[str]) -> "ConfidenceMatrix":
        """Rows permuted to follow ``ids`` (which must be the same id set)."""
        if set(ids) != set(self.ids) or len(ids) != len(self.ids):
            raise MisalignedMembers("sample id sets differ")
        pos = {sid: i for i, sid in enumerate(self.ids)}
        order = np.array([pos[s] for s in ids], dtype=np.int64)
        labels = None if self.labels is None else tuple(self.labels[i] for i in order)
        return ConfidenceMatrix(tuple(ids), self.classes, self.probs[order], labels, self.split)

    def with_labels(self, labels_by_id: dict[str, str]) -> "ConfidenceMatrix":
        return ConfidenceMatrix(self.ids, self.classes, self.probs,
                                tuple(labels_by_id[s] for s in self.ids), self.split)

    def to_csv(self, path=None, meta: dict | None = None) -> str:
        buf = io.StringIO()
        info = {}
        if self.split:
            info["split"] = self.split
        info.update(meta or {})
        for k in sorted(info):
            buf.write(f"# {k}={info[k]}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["id", "true_label", *self.classes])
        labels = self.labels or ("",) * len(self.ids)
        for sid, lab, row in zip(self.ids, labels, self.probs):
            writer.writerow([sid, lab, *(repr(float(v)) for v in row)])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    @classmethod
    def from_csv(cls, path) -> "ConfidenceMatrix":
        meta = {}
        body = []
        with open(path, encoding="utf-8", newline="") as fh:
            for line in fh:
                if line.startswith("#") and not body:
                    key, _, value = line[1:].strip().partition("=")
                    meta[key.strip()] = value.strip()
                else:
                    body.append(line)
        reader = csv.reader(body)
        header = next(reader)
        if header[:2] != ["id", "true_label"]:
            raise ValueError(f"{path}: header must start with id,true_label")
        ids, labels, rows = [], [], []
        for rec in reader:
            if not rec:
                continue
            ids.append(rec[0])
            labels.append(rec[1])
            rows.append([float(v) for v in rec[2:]])
        probs = np.array(rows, dtype=np.float64).reshape(len(rows), len(header) - 2)
        has_labels = all(labels) and bool(labels)
        return cls(tuple(ids), tuple(header[2:]), probs,
                   tuple(labels) if has_labels else None, meta.get("split"))


def align(members: Sequence[ConfidenceMatrix]) -> list[ConfidenceMatrix]:
    """Reorder every member to the first member's id order.

    Members must share class order and the id set; alignment is by id, not
    row position.
    """
    if not members:
        raise MisalignedMembers("no members given")
    ref = members[0]
    out = [ref]
    for m in members[1:]:
        if m.classes != ref.classes:
            raise MisalignedMembers("members disagree on class order")
        if set(m.ids) != set(ref.ids):
            raise MisalignedMembers("members cover different sample ids")
        out.append(m.reorder(ref.ids))
    return out


def shared_labels(members: Sequence[ConfidenceMatrix]) -> tuple[str, ...] | None:
    for m in members:
        if m.labels is not None:
            return m.labels
    return None
