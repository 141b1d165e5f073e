"""Masked language model pretraining.

Builds training batches by packing encoded sentences to a phase-specific
maximum length, corrupts them with the 80/10/10 masking policy, and runs
bias-corrected Adam updates with gradient accumulation. A phase plan switches
the packing length partway through training without touching any parameter,
which is what makes long-range training affordable: attention cost grows
quadratically with sequence length, so most steps run short.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import wordpiece
from .encoder import Batch, EncoderConfig, mlm_forward_loss
from .wordpiece import CLS_ID, MASK_ID, PAD_ID, SEP_ID, Vocabulary

N_RESERVED_IDS = 5  # random replacement never draws a special token


@dataclass(frozen=True)
class MaskingPolicy:
    mask_prob: float = 0.15
    replace_with_mask: float = 0.8
    replace_with_random: float = 0.1
    keep_original: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ValueError(f"mask_prob must be in [0, 1], got {self.mask_prob}")
        total = self.replace_with_mask + self.replace_with_random + self.keep_original
        if not math.isclose(total, 1.0, rel_tol=0.0, abs_tol=1e-9):
            raise ValueError(f"sub-fractions must sum to 1, got {total}")
        for name in ("replace_with_mask", "replace_with_random", "keep_original"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def apply_masking(
    policy: MaskingPolicy,
    token_ids: np.ndarray,
    maskable: np.ndarray,
    vocab_size: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Corrupt one id sequence for masked-token prediction.

    Each maskable position is independently selected with probability
    mask_prob. Selected positions become [MASK] with probability 0.8, a
    uniformly random non-special id with probability 0.1, and stay unchanged
    otherwise; the original id is always the prediction target. Positions
    with maskable 0 (specials, padding) are never touched.

    Returns (corrupted ids, selected positions, original ids at those
    positions). Zero selections yield empty arrays; the caller decides how
    to proceed.
    """
    token_ids = np.asarray(token_ids, dtype=np.int64)
    maskable = np.asarray(maskable, dtype=bool)
    if token_ids.shape != maskable.shape or token_ids.ndim != 1:
        raise ValueError("token_ids and maskable must be equal-length 1-D arrays")
    if vocab_size <= N_RESERVED_IDS:
        raise ValueError(f"vocab_size must exceed {N_RESERVED_IDS}")

    corrupted = token_ids.copy()
    selected = maskable & (rng.random(len(token_ids)) < policy.mask_prob)
    positions = np.nonzero(selected)[0]
    targets = token_ids[positions].copy()
    action = rng.random(len(positions))
    random_ids = rng.integers(N_RESERVED_IDS, vocab_size, size=len(positions))
    for idx, pos in enumerate(positions):
        if action[idx] < policy.replace_with_mask:
            corrupted[pos] = MASK_ID
        elif action[idx] < policy.replace_with_mask + policy.replace_with_random:
            corrupted[pos] = random_ids[idx]
        # else: keep the original id, still predicted
    return corrupted, positions, targets


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        for name in ("beta1", "beta2"):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                raise ValueError(f"{name} must be in [0, 1), got {value}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")


@dataclass
class OptimizerState:
    config: AdamConfig
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0


def init_optimizer(params: dict[str, np.ndarray], config: AdamConfig) -> OptimizerState:
    return OptimizerState(
        config=config,
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
    )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """One bias-corrected Adam update. Returns fresh params and state; the
    inputs are left untouched."""
    if set(grads) != set(params):
        missing = set(params) ^ set(grads)
        raise ValueError(f"gradient keys do not match parameters: {sorted(missing)[:5]}")
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise ValueError(f"non-finite gradient for parameter {name!r}")

    c = state.config
    t = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = c.beta1 * state.m[name] + (1.0 - c.beta1) * g
        v = c.beta2 * state.v[name] + (1.0 - c.beta2) * g * g
        m_hat = m / (1.0 - c.beta1 ** t)
        v_hat = v / (1.0 - c.beta2 ** t)
        new_params[name] = p - c.lr * m_hat / (np.sqrt(v_hat) + c.epsilon)
        new_m[name] = m
        new_v[name] = v
    return new_params, OptimizerState(config=c, m=new_m, v=new_v, step=t)


@dataclass(frozen=True)
class AccumulationConfig:
    micro_batch_size: int
    accumulation_steps: int
    effective_batch: int

    def __post_init__(self):
        if self.micro_batch_size < 1 or self.accumulation_steps < 1:
            raise ValueError("micro_batch_size and accumulation_steps must be >= 1")
        if self.effective_batch != self.micro_batch_size * self.accumulation_steps:
            raise ValueError(
                f"effective_batch {self.effective_batch} != "
                f"{self.micro_batch_size} * {self.accumulation_steps}"
            )


def accumulate_and_step(
    loss_grad_fn: Callable,
    params: dict[str, np.ndarray],
    state: OptimizerState,
    micro_batches: Sequence,
    accum: AccumulationConfig,
) -> tuple[dict[str, np.ndarray], OptimizerState, float]:
    """Accumulate gradients over micro-batches, then apply one Adam update.

    loss_grad_fn(params, micro_batch) must return (loss, grads, n_terms)
    where n_terms is the number of averaged loss terms in that micro-batch.
    Per-micro-batch gradients are combined weighted by n_terms, which makes
    the update identical to a single pass over the union of the
    micro-batches.
    """
    if len(micro_batches) != accum.accumulation_steps:
        raise ValueError(
            f"got {len(micro_batches)} micro-batches, expected {accum.accumulation_steps}"
        )
    total_terms = 0
    total_loss = 0.0
    acc: dict[str, np.ndarray] = {}
    for mb in micro_batches:
        loss, grads, n_terms = loss_grad_fn(params, mb)
        if n_terms < 1:
            raise ValueError("micro-batch contributed no loss terms")
        total_terms += n_terms
        total_loss += loss * n_terms
        for name, g in grads.items():
            if name in acc:
                acc[name] += g * n_terms
            else:
                acc[name] = g * n_terms
    for name in acc:
        acc[name] /= total_terms
    params, state = adam_step(params, acc, state)
    return params, state, total_loss / total_terms


@dataclass(frozen=True)
class PhasePlan:
    """Sequence-length curriculum: (max_seq_len, n_steps) stages in order."""

    phases: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if not self.phases:
            raise ValueError("phase plan is empty")
        previous = 0
        for max_len, steps in self.phases:
            if max_len < 3:
                raise ValueError(f"max_seq_len {max_len} leaves no room for content")
            if steps < 1:
                raise ValueError(f"phase step count must be >= 1, got {steps}")
            if max_len < previous:
                raise ValueError("phase lengths must be non-decreasing")
            previous = max_len

    @property
    def total_steps(self) -> int:
        return sum(steps for _, steps in self.phases)

    def max_length(self) -> int:
        return self.phases[-1][0]


@dataclass(frozen=True)
class LossLogEntry:
    step: int
    phase: int
    max_seq_len: int
    loss: float


@dataclass
class PretrainResult:
    params: dict[str, np.ndarray]
    config: EncoderConfig
    loss_log: list[LossLogEntry]
    phase_boundaries: list[int]  # first step index of each phase


def lr_schedule(schedule: str, peak_lr: float, total_steps: int, warmup_fraction: float = 0.01):
    """Step -> learning rate. "constant" ignores warmup; "linear" warms up
    linearly to peak_lr, then decays linearly toward zero at total_steps."""
    if schedule == "constant":
        return lambda step: peak_lr
    if schedule == "linear":
        warmup = max(1, int(round(total_steps * warmup_fraction)))

        def lr(step):
            if step < warmup:
                return peak_lr * (step + 1) / warmup
            remaining = max(total_steps - warmup, 1)
            return peak_lr * max(0.0, (total_steps - step) / remaining)

        return lr
    raise ValueError(f"unknown schedule {schedule!r}")


def pack_sequences(id_seqs: Sequence[Sequence[int]], max_seq_len: int) -> list[list[int]]:
    """Concatenate consecutive sentences into chunks of at most
    max_seq_len - 2 content ids (leaving room for [CLS] and [SEP]).
    Sentences longer than one chunk are split across consecutive chunks, so
    no text is dropped."""
    budget = max_seq_len - 2
    if budget < 1:
        raise ValueError(f"max_seq_len {max_seq_len} leaves no room for content")
    chunks: list[list[int]] = []
    current: list[int] = []
    for seq in id_seqs:
        seq = list(seq)
        while seq:
            room = budget - len(current)
            if room == 0:
                chunks.append(current)
                current = []
                room = budget
            take = seq if len(seq) <= room else seq[:room]
            current.extend(take)
            seq = seq[len(take):]
    if current:
        chunks.append(current)
    return chunks


def _frame_chunk(chunk: list[int], max_seq_len: int) -> tuple[np.ndarray, np.ndarray]:
    ids = np.full(max_seq_len, PAD_ID, dtype=np.int64)
    ids[0] = CLS_ID
    ids[1:1 + len(chunk)] = chunk
    ids[1 + len(chunk)] = SEP_ID
    mask = np.zeros(max_seq_len, dtype=np.int64)
    mask[:2 + len(chunk)] = 1
    return ids, mask


def _build_micro_batch(rows, policy, vocab_size, rng, max_seq_len):
    ids = np.stack([r[0] for r in rows])
    mask = np.stack([r[1] for r in rows])
    segments = np.zeros_like(ids)
    corrupted = ids.copy()
    positions = []
    targets = []
    for b in range(len(rows)):
        maskable = (mask[b] == 1) & (ids[b] != CLS_ID) & (ids[b] != SEP_ID)
        row, pos, tgt = apply_masking(policy, ids[b], maskable, vocab_size, rng)
        corrupted[b] = row
        positions.extend((b, p) for p in pos)
        targets.extend(tgt)
    if not positions:
        # vanishingly rare at 15%; force one target so the step is defined
        b = 0
        maskable = np.nonzero((mask[b] == 1) & (ids[b] != CLS_ID) & (ids[b] != SEP_ID))[0]
        p = int(maskable[0])
        positions.append((b, p))
        targets.append(int(ids[b, p]))
        corrupted[b, p] = MASK_ID
    batch = Batch(token_ids=corrupted, attention_mask=mask, segment_ids=segments)
    return batch, np.array(positions, dtype=np.int64), np.array(targets, dtype=np.int64)


def run_pretraining(
    corpus: Sequence[str],
    vocab: Vocabulary,
    config: EncoderConfig,
    plan: PhasePlan,
    policy: MaskingPolicy,
    accum: AccumulationConfig,
    adam: AdamConfig,
    seed: int,
    params: dict[str, np.ndarray] | None = None,
    schedule: str = "constant",
    warmup_fraction: float = 0.01,
    phase_callback: Callable | None = None,
) -> PretrainResult:
    """Train the encoder on a sentence corpus with the masked-LM objective.

    Each line of the corpus is normalized, encoded, and packed to the active
    phase's maximum length. Every optimizer step consumes
    accumulation_steps micro-batches; the logged loss is the step's
    accumulated mean. Phase transitions re-pack the data and nothing else:
    parameters and optimizer state carry over untouched. phase_callback, if
    given, is called as phase_callback(phase_index, step, params) at the
    start of each phase.

    The same corpus, vocabulary, configuration, and seed always produce the
    same result, bit for bit.
    """
    if plan.max_length() > config.max_positions:
        raise ValueError(
            f"plan length {plan.max_length()} exceeds max_positions {config.max_positions}"
        )
    from .encoder import init_params  # local import keeps module load light

    encoded = [list(wordpiece.encode(vocab, wordpiece.normalize(line)).ids)
               for line in corpus]
    encoded = [seq for seq in encoded if seq]
    if not encoded:
        raise ValueError("corpus has no encodable content")

    if params is None:
        params = init_params(config, seed)
    state = init_optimizer(params, adam)
    rng = np.random.default_rng(seed + 1)
    lr_of = lr_schedule(schedule, adam.lr, plan.total_steps, warmup_fraction)

    def loss_grad_fn(p, mb):
        batch, positions, targets = mb
        loss, grads = mlm_forward_loss(p, config, batch, positions, targets)
        return loss, grads, len(targets)

    loss_log: list[LossLogEntry] = []
    phase_boundaries: list[int] = []
    global_step = 0
    for phase_index, (max_seq_len, n_steps) in enumerate(plan.phases):
        phase_boundaries.append(global_step)
        if phase_callback is not None:
            phase_callback(phase_index, global_step, params)
        chunks = pack_sequences(encoded, max_seq_len)
        if len(chunks) < accum.micro_batch_size:
            raise ValueError(
                f"corpus packs into {len(chunks)} examples at length {max_seq_len}, "
                f"fewer than one micro-batch of {accum.micro_batch_size}"
            )
        framed = [_frame_chunk(c, max_seq_len) for c in chunks]
        order: list[int] = []
        for _ in range(n_steps):
            micro_batches = []
            for _ in range(accum.accumulation_steps):
                if len(order) < accum.micro_batch_size:
                    reshuffle = list(range(len(framed)))
                    rng.shuffle(reshuffle)
                    order.extend(reshuffle)
                take, order = order[:accum.micro_batch_size], order[accum.micro_batch_size:]
                rows = [framed[i] for i in take]
                micro_batches.append(
                    _build_micro_batch(rows, policy, config.vocab_size, rng, max_seq_len)
                )
            state = replace(state, config=replace(adam, lr=lr_of(global_step)))
            params, state, loss = accumulate_and_step(
                loss_grad_fn, params, state, micro_batches, accum
            )
            loss_log.append(LossLogEntry(
                step=global_step, phase=phase_index, max_seq_len=max_seq_len, loss=loss,
            ))
            global_step += 1
    return PretrainResult(
        params=params, config=config, loss_log=loss_log, phase_boundaries=phase_boundaries,
    )


def write_loss_log(path, loss_log: Sequence[LossLogEntry]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write("step,phase,max_seq_len,loss\n")
        for entry in loss_log:
            handle.write(f"{entry.step},{entry.phase},{entry.max_seq_len},{entry.loss:.6f}\n")
