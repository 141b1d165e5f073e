"""Task fine-tuning on top of a pretrained encoder.

Supported task shapes:
  ner        per-word BIO tagging; only each word's first piece is scored
  pair       single-class prediction from the first-position summary vector,
             used for inference pairs and for concept-pair relations (the
             concepts are wrapped in reserved typed marker tokens)
  multilabel independent per-label probabilities over a fixed inventory,
             thresholded at 0.5

Every run is specified by (checkpoint, task, data, seed); repeating a seed
reproduces the run exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Sequence

import numpy as np

from . import metrics
from .encoder import (
    Batch, EncoderConfig, forward, head_multilabel, head_pair_classify,
    head_token_classify, init_multilabel_head, init_pair_head, init_token_head,
    multilabel_loss, pair_classify_loss, token_classify_loss,
)
from .pretrain import AdamConfig, adam_step, init_optimizer
from .wordpiece import CLS_ID, PAD_ID, SEP_ID, Vocabulary, encode_word, normalize

IGNORE_LABEL = "[IGNORE]"

NER_2010_TYPES = ("problem", "treatment", "test")
NER_2012_TYPES = ("clinical", "department", "evidential", "occurrence", "temporal")
RELATION_2010_LABELS = (
    "problem-indicates-problem",
    "test-reveals-problem",
    "test-investigates-problem",
    "treatment-improves-problem",
    "treatment-worsens-problem",
    "treatment-causes-problem",
    "treatment-administered-for-problem",
    "treatment-not-administered-for-problem",
)
NLI_LABELS = ("entailment", "contradiction", "neutral")


@dataclass(frozen=True)
class TaskSpec:
    name: str
    kind: str  # "ner" | "pair" | "multilabel"
    labels: tuple[str, ...]
    selection_metric: str  # "entity_f1" | "accuracy" | "micro_f1"
    concept_types: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in ("ner", "pair", "multilabel"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if not self.labels:
            raise ValueError("task needs at least one label")

    def bio_tags(self) -> list[str]:
        if self.kind != "ner":
            raise ValueError("bio_tags only applies to ner tasks")
        tags = ["O"]
        for t in self.labels:
            tags.extend([f"B-{t}", f"I-{t}"])
        return tags


def _fixture_labels(filename: str) -> tuple[str, ...]:
    text = resources.files("clinlm").joinpath("data", filename).read_text(encoding="utf-8")
    return tuple(line for line in text.splitlines() if line.strip())


def builtin_task(name: str) -> TaskSpec:
    """Task presets for the benchmark suite."""
    if name == "ner-2010":
        return TaskSpec(name, "ner", NER_2010_TYPES, "entity_f1")
    if name == "ner-2012":
        return TaskSpec(name, "ner", NER_2012_TYPES, "entity_f1")
    if name == "re-2010":
        return TaskSpec(name, "pair", RELATION_2010_LABELS, "micro_f1",
                        concept_types=NER_2010_TYPES)
    if name == "mednli":
        return TaskSpec(name, "pair", NLI_LABELS, "accuracy")
    if name == "icd9-top50":
        return TaskSpec(name, "multilabel", _fixture_labels("icd9_top50.txt"), "micro_f1")
    if name == "therapeutic-class":
        return TaskSpec(name, "multilabel", _fixture_labels("therapeutic_classes.txt"),
                        "micro_f1")
    raise ValueError(f"unknown task {name!r}")


def align_labels_to_pieces(word_labels: Sequence[str],
                           word_pieces: Sequence[Sequence[str]]) -> list[str]:
    """Spread word labels over wordpiece positions: the first piece of each
    word carries the word's label, every later piece carries IGNORE_LABEL."""
    if len(word_labels) != len(word_pieces):
        raise ValueError(
            f"{len(word_labels)} labels for {len(word_pieces)} segmented words"
        )
    out: list[str] = []
    for label, pieces in zip(word_labels, word_pieces):
        if not pieces:
            raise ValueError("word segmented into zero pieces")
        out.append(label)
        out.extend([IGNORE_LABEL] * (len(pieces) - 1))
    return out


def marker_token(concept_type: str, closing: bool) -> str:
    return f"[{concept_type}-{'end' if closing else 'start'}]"


def marker_tokens(concept_types: Iterable[str]) -> list[str]:
    out = []
    for t in sorted(set(concept_types)):
        out.extend([marker_token(t, False), marker_token(t, True)])
    return out


def mark_concepts(words: Sequence[str],
                  span_a: tuple[int, int], type_a: str,
                  span_b: tuple[int, int], type_b: str) -> list[str]:
    """Wrap two word spans (half-open indices) in typed boundary markers.

    The marked sequence keeps the original word order and grows by exactly
    four marker pseudo-words. Overlapping or out-of-range spans are errors.
    """
    spans = sorted([(span_a, type_a), (span_b, type_b)])
    for (s, e), _ in spans:
        if not (0 <= s < e <= len(words)):
            raise ValueError(f"span ({s}, {e}) out of range for {len(words)} words")
    (first, t1), (second, t2) = spans
    if first[1] > second[0]:
        raise ValueError(f"concept spans {first} and {second} overlap")
    out = list(words)
    # insert right-to-left so earlier indices stay valid
    out.insert(second[1], marker_token(t2, True))
    out.insert(second[0], marker_token(t2, False))
    out.insert(first[1], marker_token(t1, True))
    out.insert(first[0], marker_token(t1, False))
    return out


def unmark_concepts(words: Sequence[str], concept_types: Iterable[str]) -> list[str]:
    markers = set(marker_tokens(concept_types))
    return [w for w in words if w not in markers]


def extend_for_markers(vocab: Vocabulary, params, config: EncoderConfig,
                       concept_types: Iterable[str], seed: int):
    """Add reserved marker tokens to the vocabulary and grow the embedding
    (and masked-LM output) tables to match. Existing rows are untouched."""
    markers = [m for m in marker_tokens(concept_types) if m not in vocab]
    if not markers:
        return vocab, params, config
    new_vocab = vocab.with_extra_tokens(markers)
    rng = np.random.default_rng(seed)
    new_params = dict(params)
    extra = len(markers)
    new_params["tok_emb"] = np.vstack(
        [params["tok_emb"], rng.normal(0.0, 0.02, size=(extra, config.hidden_dim))]
    )
    if "mlm_w" in params:
        new_params["mlm_w"] = np.hstack(
            [params["mlm_w"], rng.normal(0.0, 0.02, size=(config.hidden_dim, extra))]
        )
        new_params["mlm_b"] = np.concatenate([params["mlm_b"], np.zeros(extra)])
    new_config = EncoderConfig(**{
        **{f: getattr(config, f) for f in config.__dataclass_fields__},
        "vocab_size": config.vocab_size + extra,
    })
    return new_vocab, new_params, new_config


def prepare_document(text: str, vocab: Vocabulary, max_positions: int) -> Batch:
    """One padded row: [CLS], the first max_positions - 2 pieces, [SEP].

    Truncation keeps the document prefix, so the same text prepared at two
    lengths shares its retained pieces."""
    if max_positions < 3:
        raise ValueError(f"max_positions {max_positions} leaves no room for content")
    pieces = []
    for word in normalize(text).split():
        pieces.extend(encode_word(vocab, word))
    content = [vocab.id_of(p) for p in pieces[:max_positions - 2]]
    ids = np.full(max_positions, PAD_ID, dtype=np.int64)
    ids[0] = CLS_ID
    ids[1:1 + len(content)] = content
    ids[1 + len(content)] = SEP_ID
    mask = np.zeros(max_positions, dtype=np.int64)
    mask[:2 + len(content)] = 1
    segments = np.zeros(max_positions, dtype=np.int64)
    return Batch(token_ids=ids[None, :], attention_mask=mask[None, :],
                 segment_ids=segments[None, :])


def prepare_pair(text_a: str, text_b: str, vocab: Vocabulary, max_positions: int) -> Batch:
    """One padded row: [CLS] a [SEP] b [SEP] with segment ids 0 and 1.
    When the pair is too long, the longer side loses pieces first."""
    if max_positions < 5:
        raise ValueError(f"max_positions {max_positions} cannot hold a framed pair")
    sides = []
    for text in (text_a, text_b):
        pieces = []
        for word in normalize(text).split():
            pieces.extend(encode_word(vocab, word))
        sides.append([vocab.id_of(p) for p in pieces])
    a, b = sides
    budget = max_positions - 3
    while len(a) + len(b) > budget:
        (a if len(a) >= len(b) else b).pop()
    ids = np.full(max_positions, PAD_ID, dtype=np.int64)
    segments = np.zeros(max_positions, dtype=np.int64)
    ids[0] = CLS_ID
    ids[1:1 + len(a)] = a
    ids[1 + len(a)] = SEP_ID
    start_b = 2 + len(a)
    ids[start_b:start_b + len(b)] = b
    ids[start_b + len(b)] = SEP_ID
    segments[start_b:start_b + len(b) + 1] = 1
    mask = np.zeros(max_positions, dtype=np.int64)
    mask[:start_b + len(b) + 1] = 1
    return Batch(token_ids=ids[None, :], attention_mask=mask[None, :],
                 segment_ids=segments[None, :])


def prepare_marked_sentence(words: Sequence[str], vocab: Vocabulary,
                            max_positions: int) -> Batch:
    """Row for a concept-marked word sequence. A word that is itself a
    vocabulary token (the reserved markers in particular) maps straight to
    its id; everything else goes through normal wordpiece segmentation."""
    if max_positions < 3:
        raise ValueError(f"max_positions {max_positions} leaves no room for content")
    content: list[int] = []
    for word in words:
        if word in vocab.token_to_id:
            content.append(vocab.id_of(word))
        else:
            content.extend(vocab.id_of(p) for p in word_pieces(vocab, word))
    content = content[:max_positions - 2]
    ids = np.full(max_positions, PAD_ID, dtype=np.int64)
    ids[0] = CLS_ID
    ids[1:1 + len(content)] = content
    ids[1 + len(content)] = SEP_ID
    mask = np.zeros(max_positions, dtype=np.int64)
    mask[:2 + len(content)] = 1
    return Batch(token_ids=ids[None, :], attention_mask=mask[None, :],
                 segment_ids=np.zeros((1, max_positions), dtype=np.int64))


@dataclass
class NerRow:
    """One encoded tagging example plus the bookkeeping needed to read
    word-level predictions back out of piece-level logits."""

    ids: np.ndarray
    mask: np.ndarray
    label_ids: np.ndarray
    loss_mask: np.ndarray
    first_piece_positions: list[int]
    word_tags: list[str]  # gold tags for the words that survived truncation


def word_pieces(vocab: Vocabulary, word: str) -> list[str]:
    """Pieces for one pre-tokenized word. Normalization may split off
    attached punctuation; the resulting sub-words are encoded in order and
    concatenated, so the word still maps to one flat piece list."""
    parts = normalize(word).split()
    if not parts:
        raise ValueError(f"word {word!r} normalizes to nothing")
    pieces: list[str] = []
    for part in parts:
        pieces.extend(encode_word(vocab, part))
    return pieces


def encode_ner_example(words: Sequence[str], tags: Sequence[str],
                       vocab: Vocabulary, tag_to_id: dict[str, int],
                       max_positions: int) -> NerRow:
    if len(words) != len(tags):
        raise ValueError(f"{len(words)} words but {len(tags)} tags")
    for tag in tags:
        if tag not in tag_to_id:
            raise ValueError(f"tag {tag!r} not in the task tag set")
    ids = [CLS_ID]
    label_ids = [0]
    loss_mask = [0]
    first_positions: list[int] = []
    kept_tags: list[str] = []
    full = False
    for word, tag in zip(words, tags):
        pieces = word_pieces(vocab, word)
        for j, piece in enumerate(pieces):
            if len(ids) >= max_positions - 1:
                full = True
                break
            ids.append(vocab.id_of(piece))
            if j == 0:
                first_positions.append(len(ids) - 1)
                kept_tags.append(tag)
                label_ids.append(tag_to_id[tag])
                loss_mask.append(1)
            else:
                label_ids.append(0)
                loss_mask.append(0)
        if full:
            break
    ids.append(SEP_ID)
    label_ids.append(0)
    loss_mask.append(0)
    pad = max_positions - len(ids)
    row_ids = np.array(ids + [PAD_ID] * pad, dtype=np.int64)
    mask = np.array([1] * len(ids) + [0] * pad, dtype=np.int64)
    return NerRow(
        ids=row_ids,
        mask=mask,
        label_ids=np.array(label_ids + [0] * pad, dtype=np.int64),
        loss_mask=np.array(loss_mask + [0] * pad, dtype=np.int64),
        first_piece_positions=first_positions,
        word_tags=kept_tags,
    )


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 3
    batch_size: int = 8
    lr: float = 1e-3
    max_steps: int | None = None
    max_positions: int | None = None  # default: the encoder's limit

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be >= 1 when given")


@dataclass
class SeedRun:
    seed: int
    params: dict[str, np.ndarray]
    dev_metric: float
    best_epoch: int


@dataclass
class FinetuneResult:
    task: TaskSpec
    runs: list[SeedRun]
    vocab: Vocabulary
    config: EncoderConfig

    def dev_metrics(self) -> list[float]:
        return [r.dev_metric for r in self.runs]


def _stack_batch(rows: Sequence[NerRow]) -> Batch:
    return Batch(
        token_ids=np.stack([r.ids for r in rows]),
        attention_mask=np.stack([r.mask for r in rows]),
        segment_ids=np.zeros((len(rows), len(rows[0].ids)), dtype=np.int64),
    )


def _merge_rows(batches: Sequence[Batch]) -> Batch:
    return Batch(
        token_ids=np.concatenate([b.token_ids for b in batches]),
        attention_mask=np.concatenate([b.attention_mask for b in batches]),
        segment_ids=np.concatenate([b.segment_ids for b in batches]),
    )


def predict_ner_tags(params, config, rows: Sequence[NerRow], tags: Sequence[str],
                     batch_size: int = 32) -> list[list[str]]:
    out: list[list[str]] = []
    for start in range(0, len(rows), batch_size):
        chunk = rows[start:start + batch_size]
        hidden = forward(params, config, _stack_batch(chunk))
        logits = head_token_classify(params, hidden, len(tags))
        best = logits.argmax(axis=-1)
        for i, row in enumerate(chunk):
            out.append([tags[best[i, p]] for p in row.first_piece_positions])
    return out


def predict_pair_labels(params, config, batches: Sequence[Batch], labels: Sequence[str],
                        batch_size: int = 32) -> list[str]:
    out: list[str] = []
    for start in range(0, len(batches), batch_size):
        merged = _merge_rows(batches[start:start + batch_size])
        logits = head_pair_classify(params, forward(params, config, merged))
        out.extend(labels[i] for i in logits.argmax(axis=-1))
    return out


def predict_label_sets(params, config, batches: Sequence[Batch], labels: Sequence[str],
                       threshold: float = 0.5, batch_size: int = 32) -> list[set[str]]:
    out: list[set[str]] = []
    for start in range(0, len(batches), batch_size):
        merged = _merge_rows(batches[start:start + batch_size])
        probs = head_multilabel(params, forward(params, config, merged), len(labels))
        for row in probs:
            out.append({labels[i] for i in np.nonzero(row > threshold)[0]})
    return out


def _dev_metric(task, params, config, dev, tags_or_labels):
    if task.kind == "ner":
        pred = predict_ner_tags(params, config, dev, tags_or_labels)
        gold = [row.word_tags for row in dev]
        _, _, f1 = metrics.corpus_entity_f1(gold, pred)
        return f1
    if task.kind == "pair":
        batches = [row[0] for row in dev]
        gold = [row[1] for row in dev]
        pred_ids = predict_pair_labels(params, config, batches, list(range(len(task.labels))))
        if task.selection_metric == "micro_f1":
            _, _, f1 = metrics.micro_f1([{g} for g in gold], [{p} for p in pred_ids])
            return f1
        return metrics.accuracy(gold, pred_ids)
    batches = [row[0] for row in dev]
    gold_sets = [row[1] for row in dev]
    pred_sets = predict_label_sets(params, config, batches, list(task.labels))
    gold_named = [{task.labels[i] for i in g} for g in gold_sets]
    _, _, f1 = metrics.micro_f1(gold_named, pred_sets)
    return f1


def finetune_task(
    config: EncoderConfig,
    params: dict[str, np.ndarray],
    task: TaskSpec,
    train_rows: Sequence,
    dev_rows: Sequence,
    seeds: Sequence[int],
    hyper: FinetuneConfig,
) -> list[SeedRun]:
    """Fine-tune the full encoder plus a fresh task head once per seed.

    train_rows and dev_rows must already be encoded for the task (see
    encode_ner_example, prepare_pair, prepare_document). After every epoch
    the dev selection metric is computed and the best-scoring snapshot is
    kept. Each seed controls its head initialization and batch order, so a
    repeated seed reproduces its run exactly.
    """
    if not seeds:
        raise ValueError("need at least one seed")
    if not train_rows or not dev_rows:
        raise ValueError("train and dev sets must be non-empty")
    tags_or_labels = task.bio_tags() if task.kind == "ner" else list(task.labels)
    runs: list[SeedRun] = []
    for seed in seeds:
        if task.kind == "ner":
            p = init_token_head(params, config, len(tags_or_labels), seed)
        elif task.kind == "pair":
            p = init_pair_head(params, config, len(task.labels), seed)
        else:
            p = init_multilabel_head(params, config, len(task.labels), seed)
        state = init_optimizer(p, AdamConfig(lr=hyper.lr))
        rng = np.random.default_rng(seed)
        step = 0
        best_metric, best_params, best_epoch = -1.0, None, -1
        done = False
        for epoch in range(hyper.epochs):
            order = rng.permutation(len(train_rows))
            for start in range(0, len(order), hyper.batch_size):
                chosen = [train_rows[i] for i in order[start:start + hyper.batch_size]]
                if task.kind == "ner":
                    batch = _stack_batch(chosen)
                    labels = np.stack([r.label_ids for r in chosen])
                    loss_mask = np.stack([r.loss_mask for r in chosen])
                    _, grads = token_classify_loss(p, config, batch, labels, loss_mask)
                elif task.kind == "pair":
                    batch = _merge_rows([r[0] for r in chosen])
                    class_ids = np.array([r[1] for r in chosen], dtype=np.int64)
                    _, grads = pair_classify_loss(p, config, batch, class_ids)
                else:
                    batch = _merge_rows([r[0] for r in chosen])
                    matrix = np.zeros((len(chosen), len(task.labels)))
                    for i, r in enumerate(chosen):
                        matrix[i, sorted(r[1])] = 1.0
                    _, grads = multilabel_loss(p, config, batch, matrix)
                p, state = adam_step(p, grads, state)
                step += 1
                if hyper.max_steps is not None and step >= hyper.max_steps:
                    done = True
                    break
            metric = _dev_metric(task, p, config, dev_rows, tags_or_labels)
            if metric > best_metric:
                best_metric = metric
                best_params = {k: arr.copy() for k, arr in p.items()}
                best_epoch = epoch
            if done:
                break
        runs.append(SeedRun(seed=seed, params=best_params,
                            dev_metric=best_metric, best_epoch=best_epoch))
    return runs


def read_ner_file(path) -> list[tuple[list[str], list[str]]]:
    """word<TAB>tag lines, blank line between sentences."""
    sentences: list[tuple[list[str], list[str]]] = []
    words: list[str] = []
    tags: list[str] = []
    with open(path, encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            line = line.rstrip("\n")
            if not line:
                if words:
                    sentences.append((words, tags))
                    words, tags = [], []
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0]:
                raise ValueError(f"{path}:{line_no}: expected word<TAB>tag, got {line!r}")
            words.append(parts[0])
            tags.append(parts[1])
    if words:
        sentences.append((words, tags))
    return sentences


def read_record_file(path, required: Sequence[str]) -> list[dict]:
    """Line-delimited JSON records, each with at least the required keys."""
    rows = []
    with open(path, encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{line_no}: bad record: {exc}") from exc
            missing = [k for k in required if k not in row]
            if missing:
                raise ValueError(f"{path}:{line_no}: record lacks keys {missing}")
            rows.append(row)
    return rows
