"""Cased wordpiece tokenization.

Implements the full subword path: punctuation-separating text normalization,
a likelihood-driven wordpiece trainer, greedy longest-match encoding with
whole-word unknown fallback, decoding, and a compression report that compares
how tightly different vocabularies encode the same datasets.

Token ids are dense: a token's id is its line number in the vocabulary file.
The five special tokens always occupy ids 0 through 4.
"""

from __future__ import annotations

import math
import statistics
import string
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Mapping, Sequence

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIALS = (PAD, UNK, CLS, SEP, MASK)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)
CONTINUATION = "##"

_ASCII_PUNCT = set(string.punctuation)


def _is_punct(ch: str) -> bool:
    return ch in _ASCII_PUNCT or unicodedata.category(ch).startswith("P")


def normalize(text: str) -> str:
    """Insert a space between every punctuation character and any letter
    directly adjacent to it, leaving all other characters alone.

    Digits do not trigger separation, so measurements like 120/80 survive
    intact. The function is idempotent: spaces inserted on the first pass
    shield the punctuation on any later pass.
    """
    out: list[str] = []
    for i, ch in enumerate(text):
        if _is_punct(ch):
            if out and out[-1].isalpha():
                out.append(" ")
            out.append(ch)
            if i + 1 < len(text) and text[i + 1].isalpha():
                out.append(" ")
        else:
            out.append(ch)
    return "".join(out)


@dataclass
class Vocabulary:
    """Ordered token inventory. Index in `tokens` is the token id."""

    tokens: list[str]
    declared_size: int = 0

    token_to_id: dict[str, int] = field(init=False, repr=False)
    _max_token_len: int = field(init=False, repr=False)

    def __post_init__(self):
        if self.declared_size == 0:
            self.declared_size = len(self.tokens)
        self.validate()
        self.token_to_id = {tok: i for i, tok in enumerate(self.tokens)}
        self._max_token_len = max(len(t) for t in self.tokens)

    def validate(self) -> None:
        if len(set(self.tokens)) != len(self.tokens):
            dupes = [t for t, c in Counter(self.tokens).items() if c > 1]
            raise ValueError(f"duplicate tokens in vocabulary: {dupes[:5]}")
        if tuple(self.tokens[:5]) != SPECIALS:
            raise ValueError(f"vocabulary must start with {SPECIALS}, got {self.tokens[:5]}")
        for tok in self.tokens[5:]:
            if tok.startswith(CONTINUATION) and len(tok) == len(CONTINUATION):
                raise ValueError(f"continuation token {tok!r} has no body")
            if not tok:
                raise ValueError("empty token in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def id_of(self, token: str) -> int:
        return self.token_to_id[token]

    def token_of(self, token_id: int) -> str:
        if not 0 <= token_id < len(self.tokens):
            raise ValueError(f"token id {token_id} outside vocabulary of size {len(self.tokens)}")
        return self.tokens[token_id]

    def with_extra_tokens(self, extra: Sequence[str]) -> "Vocabulary":
        """New vocabulary with `extra` appended; ids of existing tokens keep."""
        for tok in extra:
            if tok in self.token_to_id:
                raise ValueError(f"token {tok!r} already present")
        return Vocabulary(self.tokens + list(extra))


@dataclass(frozen=True)
class Encoding:
    ids: tuple[int, ...]
    tokens: tuple[str, ...]

    @property
    def n_tokens(self) -> int:
        return len(self.ids)


def _word_symbols(word: str) -> list[str]:
    return [word[0]] + [CONTINUATION + ch for ch in word[1:]]


def _merge_symbols(left: str, right: str) -> str:
    return left + right[len(CONTINUATION):]


def train_wordpiece(
    corpus: Iterable[str],
    declared_size: int,
    min_frequency: int = 2,
) -> Vocabulary:
    """Learn a wordpiece vocabulary of exactly `declared_size` tokens, or as
    many as the corpus supports.

    The corpus must already be normalized. Every word starts as its first
    character plus ##-prefixed continuation characters. Each round merges the
    adjacent symbol pair with the highest likelihood score

        count(pair) / (count(left) * count(right))

    subject to count(pair) >= min_frequency. Ties break by higher raw pair
    count, then by the smaller (left, right) pair. Training stops when the
    size budget is reached or no pair qualifies.
    """
    word_freq = Counter()
    for line in corpus:
        word_freq.update(line.split())
    if not word_freq:
        raise ValueError("training corpus contains no words")

    alphabet = sorted({ch for word in word_freq for ch in word})
    base = list(SPECIALS) + alphabet + [CONTINUATION + ch for ch in alphabet]
    floor = len(base)
    if declared_size < floor:
        raise ValueError(
            f"declared size {declared_size} is below the alphabet floor {floor}"
        )
    if min_frequency < 1:
        raise ValueError(f"min_frequency must be >= 1, got {min_frequency}")

    tokens = list(base)
    seen = set(tokens)
    words = {w: _word_symbols(w) for w in word_freq}

    while len(tokens) < declared_size:
        pair_count: Counter = Counter()
        symbol_count: Counter = Counter()
        for word, symbols in words.items():
            freq = word_freq[word]
            for sym in symbols:
                symbol_count[sym] += freq
            for left, right in zip(symbols, symbols[1:]):
                pair_count[(left, right)] += freq

        best_pair = None
        best_key = None
        for pair, count in pair_count.items():
            if count < min_frequency:
                continue
            merged = _merge_symbols(*pair)
            if merged in seen:
                continue
            score = count / (symbol_count[pair[0]] * symbol_count[pair[1]])
            key = (-score, -count, pair)
            if best_key is None or key < best_key:
                best_key = key
                best_pair = pair
        if best_pair is None:
            break

        merged = _merge_symbols(*best_pair)
        tokens.append(merged)
        seen.add(merged)
        for word, symbols in words.items():
            out = []
            i = 0
            while i < len(symbols):
                if (
                    i + 1 < len(symbols)
                    and (symbols[i], symbols[i + 1]) == best_pair
                ):
                    out.append(merged)
                    i += 2
                else:
                    out.append(symbols[i])
                    i += 1
            words[word] = out

    return Vocabulary(tokens, declared_size=declared_size)


def encode_word(vocab: Vocabulary, word: str) -> list[str]:
    """Greedy longest-match segmentation of one whitespace word.

    Repeatedly takes the longest vocabulary token matching the remaining
    prefix (##-prefixed once inside the word). If no token matches at some
    point, the whole word collapses to a single [UNK].
    """
    if not word:
        raise ValueError("cannot encode an empty word")
    pieces = []
    start = 0
    while start < len(word):
        prefix = CONTINUATION if start > 0 else ""
        end = min(len(word), start + vocab._max_token_len - len(prefix))
        match = None
        while end > start:
            candidate = prefix + word[start:end]
            if candidate in vocab.token_to_id:
                match = candidate
                break
            end -= 1
        if match is None:
            return [UNK]
        pieces.append(match)
        start = end
    return pieces


def encode(vocab: Vocabulary, text: str) -> Encoding:
    """Encode normalized text, word by word."""
    tokens: list[str] = []
    for word in text.split():
        tokens.extend(encode_word(vocab, word))
    return Encoding(
        ids=tuple(vocab.token_to_id[t] for t in tokens),
        tokens=tuple(tokens),
    )


def decode(vocab: Vocabulary, ids: Sequence[int]) -> str:
    """Rebuild text from ids: specials are dropped, continuation pieces glue
    to the previous piece, and everything else joins with single spaces."""
    words: list[str] = []
    for token_id in ids:
        token = vocab.token_of(token_id)
        if token in SPECIALS:
            continue
        if token.startswith(CONTINUATION) and words:
            words[-1] += token[len(CONTINUATION):]
        else:
            words.append(token)
    return " ".join(words)


def vocab_difference(a: Vocabulary, b: Vocabulary) -> tuple[list[str], list[str]]:
    """Tokens only in a and only in b, each sorted."""
    set_a, set_b = set(a.tokens), set(b.tokens)
    return sorted(set_a - set_b), sorted(set_b - set_a)


def round_half_away_from_zero(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


@dataclass(frozen=True)
class CompressionRow:
    dataset: str
    vocabulary: str
    mean_length: float
    median_length: float
    pct_diff_mean: int
    pct_diff_median: int


@dataclass(frozen=True)
class CompressionReport:
    baseline: str
    rows: tuple[CompressionRow, ...]

    def format(self) -> str:
        lines = ["dataset\tvocabulary\tmean\tpct_diff_mean\tmedian\tpct_diff_median"]
        for r in self.rows:
            lines.append(
                f"{r.dataset}\t{r.vocabulary}\t{r.mean_length:g}\t{r.pct_diff_mean}%"
                f"\t{r.median_length:g}\t{r.pct_diff_median}%"
            )
        return "\n".join(lines)


def pct_diff(candidate: float, base: float) -> int:
    """Rounded percentage change of candidate relative to base, half away
    from zero."""
    if base == 0:
        raise ValueError("baseline value is zero")
    return round_half_away_from_zero(100.0 * (candidate - base) / base)


def compression_report(
    datasets: Mapping[str, Sequence[str]],
    vocabularies: Mapping[str, Vocabulary],
    baseline: str,
) -> CompressionReport:
    """Mean and median encoded lengths per (dataset, vocabulary), with the
    rounded percentage change of each vocabulary against the baseline one.

    Texts are normalized before encoding so every vocabulary sees identical
    input. The baseline rows carry a 0% difference by construction.
    """
    if baseline not in vocabularies:
        raise ValueError(f"baseline {baseline!r} is not among the vocabularies")
    for name, texts in datasets.items():
        if not texts:
            raise ValueError(f"dataset {name!r} is empty")

    lengths: dict[tuple[str, str], tuple[float, float]] = {}
    for ds_name, texts in datasets.items():
        normalized = [normalize(t) for t in texts]
        for vb_name, vocab in vocabularies.items():
            counts = [encode(vocab, t).n_tokens for t in normalized]
            lengths[(ds_name, vb_name)] = (
                sum(counts) / len(counts),
                float(statistics.median(counts)),
            )

    rows = []
    for ds_name in datasets:
        base_mean, base_median = lengths[(ds_name, baseline)]
        for vb_name in vocabularies:
            mean, median = lengths[(ds_name, vb_name)]
            rows.append(CompressionRow(
                dataset=ds_name,
                vocabulary=vb_name,
                mean_length=mean,
                median_length=median,
                pct_diff_mean=pct_diff(mean, base_mean),
                pct_diff_median=pct_diff(median, base_median),
            ))
    return CompressionReport(baseline=baseline, rows=tuple(rows))


@dataclass(frozen=True)
class LengthReferenceRow:
    """One published (dataset, vocabulary) length measurement. pct fields are
    None on the baseline rows."""

    dataset: str
    vocabulary: str
    mean_length: float
    median_length: float
    pct_mean: int | None
    pct_median: int | None


def load_length_reference(path=None) -> list[LengthReferenceRow]:
    """Load the packaged table of encoded-length measurements across four
    vocabularies (the wikipedia-books rows are each dataset's baseline)."""
    if path is None:
        text = resources.files("clinlm").joinpath(
            "data", "encoding_length_reference.tsv").read_text(encoding="utf-8")
    else:
        with open(path, encoding="utf-8") as handle:
            text = handle.read()
    lines = text.splitlines()
    header = "dataset\tvocabulary\tmean\tmedian\tpct_mean\tpct_median"
    if not lines or lines[0] != header:
        raise ValueError("length reference lacks its header line")
    rows = []
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 6:
            raise ValueError(f"row {line_no}: expected 6 fields, got {len(parts)}")
        dataset, vocabulary, mean, median, pct_mean, pct_median = parts
        base = pct_mean == "base"
        if base != (pct_median == "base"):
            raise ValueError(f"row {line_no}: half-baseline row")
        rows.append(LengthReferenceRow(
            dataset=dataset,
            vocabulary=vocabulary,
            mean_length=float(mean),
            median_length=float(median),
            pct_mean=None if base else int(pct_mean),
            pct_median=None if base else int(pct_median),
        ))
    return rows


def verify_length_reference(rows: Sequence[LengthReferenceRow]) -> list[str]:
    """Recompute every non-baseline percentage cell from the printed mean and
    median columns and describe each cell that disagrees with the printed
    percentage. An empty result means the whole table is arithmetically
    self-consistent under nearest-integer rounding.
    """
    base: dict[str, LengthReferenceRow] = {}
    for row in rows:
        if row.pct_mean is None:
            if row.dataset in base:
                raise ValueError(f"dataset {row.dataset!r} has two baseline rows")
            base[row.dataset] = row
    deviations = []
    for row in rows:
        if row.pct_mean is None:
            continue
        if row.dataset not in base:
            raise ValueError(f"dataset {row.dataset!r} has no baseline row")
        b = base[row.dataset]
        for stat, printed, value, base_value in (
            ("mean", row.pct_mean, row.mean_length, b.mean_length),
            ("median", row.pct_median, row.median_length, b.median_length),
        ):
            computed = pct_diff(value, base_value)
            if computed != printed:
                deviations.append(
                    f"{row.dataset}/{row.vocabulary} {stat}: "
                    f"computed {computed}% but printed {printed}%"
                )
    return deviations


def write_vocab(path, vocab: Vocabulary) -> None:
    """One token per line; the line number (from zero) is the token id."""
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        for token in vocab.tokens:
            handle.write(token)
            handle.write("\n")


def read_vocab(path) -> Vocabulary:
    with open(path, encoding="utf-8") as handle:
        tokens = [line.rstrip("\n") for line in handle]
    while tokens and tokens[-1] == "":
        tokens.pop()
    return Vocabulary(tokens)
