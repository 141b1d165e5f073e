"""Span, set, and classification metrics plus multi-seed aggregation.

Entity scores are strict: a predicted span counts only when its boundaries
and label both match a gold span exactly. Degenerate denominators follow the
usual conventions: precision or recall is 1.0 when both span sets are empty
and 0.0 when only its own denominator is empty.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass
from typing import Sequence


@dataclass(frozen=True, order=True)
class Span:
    """Half-open labeled interval over sequence positions."""

    start: int
    end: int
    label: str

    def __post_init__(self):
        if self.start < 0 or self.end <= self.start:
            raise ValueError(f"invalid span [{self.start}, {self.end})")


def bio_decode(tags: Sequence[str]) -> list[Span]:
    """Spans from a BIO tag sequence.

    B-x opens a span, I-x continues one of the same type. An I-x with no
    open x-span (after O, at the start, or after a different type) is
    repaired to B-x rather than rejected. Anything other than O, B-<type>,
    or I-<type> is an error.
    """
    spans: list[Span] = []
    open_start = None
    open_label = None

    def flush(end):
        nonlocal open_start, open_label
        if open_label is not None:
            spans.append(Span(open_start, end, open_label))
            open_start = open_label = None

    for i, tag in enumerate(tags):
        if tag == "O":
            flush(i)
        elif tag.startswith("B-") and len(tag) > 2:
            flush(i)
            open_start, open_label = i, tag[2:]
        elif tag.startswith("I-") and len(tag) > 2:
            if open_label != tag[2:]:
                flush(i)  # orphan continuation: treat as a new span
                open_start, open_label = i, tag[2:]
        else:
            raise ValueError(f"position {i}: unknown tag {tag!r}")
    flush(len(tags))
    return spans


def bio_encode(spans: Sequence[Span], length: int) -> list[str]:
    """BIO tags for non-overlapping spans over a sequence of given length."""
    tags = ["O"] * length
    for span in sorted(spans):
        if span.end > length:
            raise ValueError(f"span {span} exceeds sequence length {length}")
        for i in range(span.start, span.end):
            if tags[i] != "O":
                raise ValueError(f"span {span} overlaps another span at {i}")
        tags[span.start] = f"B-{span.label}"
        for i in range(span.start + 1, span.end):
            tags[i] = f"I-{span.label}"
    return tags


def _prf(tp: int, n_pred: int, n_gold: int) -> tuple[float, float, float]:
    if n_pred == 0 and n_gold == 0:
        return 1.0, 1.0, 1.0
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_gold if n_gold else 0.0
    if precision + recall == 0.0:
        return precision, recall, 0.0
    return precision, recall, 2 * precision * recall / (precision + recall)


def entity_f1(gold: set, pred: set) -> tuple[float, float, float]:
    """Exact-match precision, recall, F1 over two span (or any item) sets."""
    return _prf(len(gold & pred), len(pred), len(gold))


def micro_f1(gold_sets: Sequence[set], pred_sets: Sequence[set]) -> tuple[float, float, float]:
    """Pooled precision, recall, F1: TP/FP/FN are summed over instances
    before any division."""
    if len(gold_sets) != len(pred_sets):
        raise ValueError(f"{len(gold_sets)} gold sets but {len(pred_sets)} predictions")
    tp = n_pred = n_gold = 0
    for g, p in zip(gold_sets, pred_sets):
        tp += len(g & p)
        n_pred += len(p)
        n_gold += len(g)
    return _prf(tp, n_pred, n_gold)


def corpus_entity_f1(gold_tag_seqs: Sequence[Sequence[str]],
                     pred_tag_seqs: Sequence[Sequence[str]],
                     token_level: bool = False) -> tuple[float, float, float]:
    """Entity scores pooled over many tagged sequences.

    The default decodes BIO tags and matches spans exactly. token_level
    instead scores each non-O position: a true positive is a position where
    gold and prediction carry the same non-O tag.
    """
    if len(gold_tag_seqs) != len(pred_tag_seqs):
        raise ValueError(
            f"{len(gold_tag_seqs)} gold sequences but {len(pred_tag_seqs)} predicted"
        )
    tp = n_pred = n_gold = 0
    for gold_tags, pred_tags in zip(gold_tag_seqs, pred_tag_seqs):
        if len(gold_tags) != len(pred_tags):
            raise ValueError("gold and predicted sequences differ in length")
        if token_level:
            for g, p in zip(gold_tags, pred_tags):
                if g != "O":
                    n_gold += 1
                if p != "O":
                    n_pred += 1
                if g == p != "O":
                    tp += 1
        else:
            g = set(bio_decode(gold_tags))
            p = set(bio_decode(pred_tags))
            tp += len(g & p)
            n_pred += len(p)
            n_gold += len(g)
    return _prf(tp, n_pred, n_gold)


def accuracy(gold: Sequence, pred: Sequence) -> float:
    if len(gold) != len(pred):
        raise ValueError(f"{len(gold)} gold labels but {len(pred)} predictions")
    if not gold:
        raise ValueError("cannot score an empty prediction list")
    return sum(g == p for g, p in zip(gold, pred)) / len(gold)


@dataclass(frozen=True)
class MetricReport:
    """Per-seed values for one metric, with their median and sample spread."""

    metric: str
    values: tuple[float, ...]
    median: float
    stddev: float


def aggregate_seeds(values: Sequence[float], metric: str = "") -> MetricReport:
    """Median and sample standard deviation (n - 1 denominator) over per-seed
    values. A single value reports zero spread."""
    if not values:
        raise ValueError("no values to aggregate")
    values = tuple(float(v) for v in values)
    spread = statistics.stdev(values) if len(values) > 1 else 0.0
    return MetricReport(
        metric=metric,
        values=values,
        median=float(statistics.median(values)),
        stddev=spread,
    )


def format_report_table(rows: Sequence[tuple[str, str, MetricReport]]) -> str:
    """Tab-separated summary: one (task, model) row per metric report."""
    lines = ["task\tmodel\tmetric\tmedian\tstddev\tseeds"]
    for task, model, report in rows:
        lines.append(
            f"{task}\t{model}\t{report.metric}\t{report.median:.4f}"
            f"\t{report.stddev:.4f}\t{len(report.values)}"
        )
    return "\n".join(lines)
