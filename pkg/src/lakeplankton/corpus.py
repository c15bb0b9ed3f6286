"""Labeled image corpus: directory scanning and stratified split manifests."""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from PIL import Image

from .prng import ALGORITHM_ID, SplitMix64

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}
DEFAULT_RATIOS = (0.70, 0.15, 0.15)


class CorpusError(Exception):
    pass


class EmptyCorpus(CorpusError):
    pass


class BadRatios(CorpusError):
    pass


@dataclass(frozen=True)
class SampleRecord:
    id: str
    label: str
    byte_length: int


@dataclass(frozen=True)
class ClassCatalog:
    names: tuple[str, ...]
    counts: tuple[int, ...]

    def __post_init__(self):
        if list(self.names) != sorted(self.names):
            raise ValueError("class names must be sorted lexicographically")
        if len(set(self.names)) != len(self.names):
            raise ValueError("duplicate class names")
        if len(self.counts) != len(self.names) or any(c < 1 for c in self.counts):
            raise ValueError("every listed class needs a count >= 1")

    @property
    def n_classes(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)

    @classmethod
    def from_records(cls, records: Iterable[SampleRecord]) -> "ClassCatalog":
        counts: dict[str, int] = {}
        for r in records:
            counts[r.label] = counts.get(r.label, 0) + 1
        names = tuple(sorted(counts))
        return cls(names, tuple(counts[n] for n in names))


@dataclass(frozen=True)
class UnreadableImage:
    path: str
    reason: str


def _is_readable(path: Path) -> str | None:
    try:
        with Image.open(path) as im:
            im.verify()
    except Exception as exc:  # PIL raises a zoo of exception types
        return f"{type(exc).__name__}: {exc}"
    return None


def _scan_class(root: Path, class_dir: Path) -> tuple[list[SampleRecord], list[UnreadableImage]]:
    records, bad = [], []
    files = sorted(
        p for p in class_dir.rglob("*")
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
    )
    for p in files:
        rel = p.relative_to(root).as_posix()
        reason = _is_readable(p)
        if reason is not None:
            log.warning("unreadable image %s (%s)", rel, reason)
            bad.append(UnreadableImage(rel, reason))
            continue
        records.append(SampleRecord(rel, class_dir.name, p.stat().st_size))
    return records, bad


def scan_corpus(root, jobs: int = 1, problems: list | None = None):
    """Index ``root/<class>/**/<image>`` into a catalog and sample records.

    Image files are searched recursively inside each class folder, so the
    ``<class>/training_data/*.jpeg`` layout of the public download works as
    is. Unreadable files are logged, appended to ``problems`` when given,
    and skipped. Classes that end up with no readable image are dropped
    from the catalog with a warning.

    Returns
    -------
    (ClassCatalog, list[SampleRecord])
        Records are sorted by id.
    """
    root = Path(root)
    if not root.is_dir():
        raise EmptyCorpus(f"corpus root {root} is not a directory")
    class_dirs = sorted((d for d in root.iterdir() if d.is_dir()), key=lambda d: d.name)
    if not class_dirs:
        raise EmptyCorpus(f"no class folders under {root}")

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        results = list(pool.map(lambda d: _scan_class(root, d), class_dirs))

    records: list[SampleRecord] = []
    for d, (recs, bad) in zip(class_dirs, results):
        if problems is not None:
            problems.extend(bad)
        if not recs:
            log.warning("class folder %s has no readable images; omitted", d.name)
            continue
        records.extend(recs)
    if not records:
        raise EmptyCorpus(f"no readable images under {root}")
    records.sort(key=lambda r: r.id)
    return ClassCatalog.from_records(records), records


@dataclass(frozen=True)
class SplitManifest:
    seed: int
    ratios: tuple[float, float, float]
    classes: tuple[str, ...]
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]
    prng: str = ALGORITHM_ID
    stratified: bool = True
    provenance: dict = field(default_factory=dict, compare=False)

    def split_of(self) -> dict[str, str]:
        out = {}
        for name in ("train", "val", "test"):
            for sid in getattr(self, name):
                out[sid] = name
        return out

    def ids(self, split: str) -> tuple[str, ...]:
        if split not in ("train", "val", "test"):
            raise ValueError(f"unknown split {split!r}")
        return getattr(self, split)

    def to_json(self) -> str:
        doc = {
            "seed": self.seed,
            "ratios": list(self.ratios),
            "prng": self.prng,
            "stratified": self.stratified,
            "classes": list(self.classes),
            "train": list(self.train),
            "val": list(self.val),
            "test": list(self.test),
        }
        if self.provenance:
            doc["provenance"] = self.provenance
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SplitManifest":
        doc = json.loads(text)
        return cls(
            seed=doc["seed"],
            ratios=tuple(doc["ratios"]),
            classes=tuple(doc["classes"]),
            train=tuple(doc["train"]),
            val=tuple(doc["val"]),
            test=tuple(doc["test"]),
            prng=doc["prng"],
            stratified=doc.get("stratified", True),
            provenance=doc.get("provenance", {}),
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SplitManifest":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def split_counts(m: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    """(train, val, test) sizes for a class of ``m`` samples."""
    _, r_val, r_test = ratios
    # the epsilon keeps 0.15 * 20 from flooring to 2
    n_val = math.floor(r_val * m + 1e-9)
    n_test = math.floor(r_test * m + 1e-9)
    if m >= 3:
        if r_val > 0:
            n_val = max(n_val, 1)
        if r_test > 0:
            n_test = max(n_test, 1)
    n_train = m - n_val - n_test
    if n_train < 0:
        raise BadRatios(f"ratios {tuple(ratios)} leave no room for a class of {m}")
    return n_train, n_val, n_test


def _check_ratios(ratios) -> tuple[float, float, float]:
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3:
        raise BadRatios("need exactly three ratios (train, val, test)")
    if any(r < 0 for r in ratios):
        raise BadRatios(f"negative ratio in {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise BadRatios(f"ratios {ratios} do not sum to 1")
    return ratios


def make_split(catalog: ClassCatalog, records: Sequence[SampleRecord], seed: int,
               ratios=DEFAULT_RATIOS) -> SplitManifest:
    """Stratified train/val/test assignment driven only by ``seed``.

    Classes are visited in catalog order; each class's ids are sorted, then
    shuffled with one shared SplitMix64 stream. The first ``n_val`` go to val,
    the next ``n_test`` to test, the rest to train.
    """
    ratios = _check_ratios(ratios)
    by_class: dict[str, list[str]] = {name: [] for name in catalog.names}
    for r in records:
        if r.label not in by_class:
            raise ValueError(f"record {r.id} has label {r.label!r} outside the catalog")
        by_class[r.label].append(r.id)

    rng = SplitMix64(seed)
    train, val, test = [], [], []
    for name in catalog.names:
        ids = sorted(by_class[name])
        if not ids:
            raise ValueError(f"class {name!r} has no samples")
        _, n_val, n_test = split_counts(len(ids), ratios)
        rng.shuffle(ids)
        val.extend(ids[:n_val])
        test.extend(ids[n_val:n_val + n_test])
        train.extend(ids[n_val + n_test:])

    return SplitManifest(
        seed=seed,
        ratios=ratios,
        classes=catalog.names,
        train=tuple(sorted(train)),
        val=tuple(sorted(val)),
        test=tuple(sorted(test)),
    )


def labels_from_ids(ids: Iterable[str]) -> list[str]:
    """Class label of each id, i.e. its first path component."""
    return [sid.split("/", 1)[0] for sid in ids]


def resolve(root, sample_id: str) -> str:
    return os.path.join(os.fspath(root), *sample_id.split("/"))
