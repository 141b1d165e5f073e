"""Clinical note corpus operations.

Covers the bookkeeping that happens before any modeling: selecting usable
discharge summaries, splitting patients into train/dev/test without leakage,
picking the most frequent label codes, and summarizing dataset lengths.

All functions are pure and deterministic; anything random takes an explicit
seed.
"""

from __future__ import annotations

import json
import random
import statistics
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Iterable, Sequence

SUBSET_NAMES = ("train", "dev", "test")


@lru_cache(maxsize=None)
def _packaged_lines(filename: str) -> tuple[str, ...]:
    text = resources.files("clinlm").joinpath("data", filename).read_text(encoding="utf-8")
    return tuple(line for line in text.splitlines() if line.strip())


def icd9_top50_codes() -> tuple[str, ...]:
    """The closed 50-code diagnosis label list, most frequent first."""
    return _packaged_lines("icd9_top50.txt")


def therapeutic_class_names() -> tuple[str, ...]:
    """The closed 50-class medication label list."""
    return _packaged_lines("therapeutic_classes.txt")


def note_type_catalog() -> tuple[str, ...]:
    """Seed list of note categories; note_type is extensible beyond it."""
    return _packaged_lines("note_types.txt")


@dataclass
class NoteRecord:
    """One clinical note. char_length is always derived from text."""

    note_id: str
    patient_id: str
    encounter_id: str
    note_type: str
    provider_type: str
    text: str
    char_length: int = field(init=False)

    def __post_init__(self):
        for name in ("note_id", "patient_id", "encounter_id"):
            if not getattr(self, name):
                raise ValueError(f"{name} must be non-empty")
        self.char_length = len(self.text)


@dataclass(frozen=True)
class EncounterLabelSet:
    """Diagnosis codes and medication classes attached to one encounter.

    Both label sets are validated against their closed 50-entry lists; either
    may be empty.
    """

    encounter_id: str
    icd9_codes: frozenset[str] = frozenset()
    therapeutic_classes: frozenset[str] = frozenset()

    def __post_init__(self):
        if not self.encounter_id:
            raise ValueError("encounter_id must be non-empty")
        object.__setattr__(self, "icd9_codes", frozenset(self.icd9_codes))
        object.__setattr__(self, "therapeutic_classes", frozenset(self.therapeutic_classes))
        unknown = self.icd9_codes - set(icd9_top50_codes())
        if unknown:
            raise ValueError(f"unknown diagnosis codes: {sorted(unknown)}")
        unknown = self.therapeutic_classes - set(therapeutic_class_names())
        if unknown:
            raise ValueError(f"unknown therapeutic classes: {sorted(unknown)}")


@dataclass(frozen=True)
class DatasetStats:
    n_examples: int
    min_words: int
    max_words: int
    median_words: float
    mean_words: float


def filter_discharge_summaries(notes: Sequence[NoteRecord]) -> list[NoteRecord]:
    """Keep notes longer than 2000 characters, drop nursing-authored ones,
    and retain at most one note per encounter (the longest; ties go to the
    lexicographically smallest note_id).

    Output order follows the first appearance of each kept encounter in the
    input. Applying the filter twice gives the same result as applying it
    once.
    """
    candidates = [
        n for n in notes
        if n.char_length > 2000 and n.provider_type.lower() != "nursing"
    ]
    best: dict[str, NoteRecord] = {}
    order: list[str] = []
    for note in candidates:
        if note.encounter_id not in best:
            best[note.encounter_id] = note
            order.append(note.encounter_id)
            continue
        kept = best[note.encounter_id]
        if (-note.char_length, note.note_id) < (-kept.char_length, kept.note_id):
            best[note.encounter_id] = note
    return [best[eid] for eid in order]


def split_by_patient(
    patient_ids: Iterable[str],
    ratios: tuple[float, float, float],
    seed: int,
) -> dict[str, str]:
    """Assign each distinct patient id to train/dev/test.

    Duplicate ids collapse to a single assignment, so the result is a
    partition of patients, never of notes. The distinct ids are sorted,
    shuffled with the given seed, and sliced by the ratio fractions with
    floor arithmetic; leftover patients go to train. The assignment depends
    only on the id set, the ratios, and the seed.
    """
    total = sum(ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or total == 0:
        raise ValueError(f"ratios must be three non-negative numbers, not all zero: {ratios!r}")
    ids = sorted(set(patient_ids))
    random.Random(seed).shuffle(ids)
    n = len(ids)
    n_dev = int(n * ratios[1] / total)
    n_test = int(n * ratios[2] / total)
    n_train = n - n_dev - n_test
    assignment: dict[str, str] = {}
    for pid in ids[:n_train]:
        assignment[pid] = "train"
    for pid in ids[n_train:n_train + n_dev]:
        assignment[pid] = "dev"
    for pid in ids[n_train + n_dev:]:
        assignment[pid] = "test"
    return assignment


def select_top_k_labels(occurrences: Iterable[str], k: int) -> list[str]:
    """Return the k most frequent labels, most frequent first.

    Ties break lexicographically so reruns are reproducible. Fewer than k
    distinct labels just yields all of them; an empty occurrence list yields
    an empty list.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    counts = Counter(occurrences)
    ranked = sorted(counts.items(), key=lambda item: (-item[1], item[0]))
    return [label for label, _ in ranked[:k]]


def dataset_stats(texts: Sequence[str]) -> DatasetStats:
    """Whitespace-word length summary of a set of examples."""
    if not texts:
        raise ValueError("cannot summarize an empty dataset")
    lengths = [len(t.split()) for t in texts]
    return DatasetStats(
        n_examples=len(lengths),
        min_words=min(lengths),
        max_words=max(lengths),
        median_words=float(statistics.median(lengths)),
        mean_words=sum(lengths) / len(lengths),
    )


def format_stats_row(name: str, stats: DatasetStats) -> str:
    """One tab-separated report row: name, n, min, max, median, mean."""
    median = stats.median_words
    median_text = f"{int(median)}" if median == int(median) else f"{median:g}"
    return "\t".join([
        name,
        str(stats.n_examples),
        str(stats.min_words),
        str(stats.max_words),
        median_text,
        f"{stats.mean_words:.1f}",
    ])


def read_notes(path) -> list[NoteRecord]:
    """Read line-delimited JSON note records."""
    notes = []
    with open(path, encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
                notes.append(NoteRecord(
                    note_id=row["note_id"],
                    patient_id=row["patient_id"],
                    encounter_id=row["encounter_id"],
                    note_type=row["note_type"],
                    provider_type=row["provider_type"],
                    text=row["text"],
                ))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{line_no}: bad note record: {exc}") from exc
    return notes


def write_notes(path, notes: Sequence[NoteRecord]) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for n in notes:
            handle.write(json.dumps({
                "note_id": n.note_id,
                "patient_id": n.patient_id,
                "encounter_id": n.encounter_id,
                "note_type": n.note_type,
                "provider_type": n.provider_type,
                "text": n.text,
            }, ensure_ascii=False, sort_keys=True))
            handle.write("\n")


def write_split_manifest(path, assignment: dict[str, str]) -> None:
    """Write patient-to-subset lines, sorted by patient id for stable bytes."""
    with open(path, "w", encoding="utf-8") as handle:
        for pid in sorted(assignment):
            handle.write(f"{pid}\t{assignment[pid]}\n")


def read_split_manifest(path) -> dict[str, str]:
    assignment = {}
    with open(path, encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2 or parts[1] not in SUBSET_NAMES:
                raise ValueError(f"{path}:{line_no}: bad manifest line {line!r}")
            assignment[parts[0]] = parts[1]
    return assignment
