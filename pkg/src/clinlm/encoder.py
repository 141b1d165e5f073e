"""Bidirectional transformer encoder with exact gradients.

Pure numpy, float64 throughout. The forward pass sums token, position, and
segment embeddings, applies layer normalization, then runs a stack of
multi-head self-attention blocks with post-norm residuals and GELU
feed-forward sublayers. Every loss function returns analytic gradients for
all parameters, derived by hand and checked against central finite
differences in the test suite.

Parameters live in a flat dict keyed by name, which keeps optimizers,
accumulation, checkpointing, and gradient checking trivial.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import erf

CHECKPOINT_FORMAT = "clinlm-checkpoint"
CHECKPOINT_VERSION = 1
_NEG_INF = -1e9


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    hidden_dim: int = 64
    n_layers: int = 2
    n_heads: int = 2
    ff_dim: int = 128
    max_positions: int = 32
    n_segments: int = 2
    dropout: float = 0.0
    ln_epsilon: float = 1e-12

    def __post_init__(self):
        sizes = {
            "vocab_size": self.vocab_size,
            "hidden_dim": self.hidden_dim,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "ff_dim": self.ff_dim,
            "max_positions": self.max_positions,
            "n_segments": self.n_segments,
        }
        for name, value in sizes.items():
            if value < 1:
                raise ValueError(f"{name} must be >= 1, got {value}")
        if self.vocab_size < 5:
            raise ValueError(
                f"vocab_size must cover the 5 special tokens, got {self.vocab_size}"
            )
        if self.hidden_dim % self.n_heads != 0:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} not divisible by n_heads {self.n_heads}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.n_heads


def base_config(vocab_size: int) -> EncoderConfig:
    """Conventional base scale: 12 layers, 12 heads, hidden 768, 512 positions."""
    return EncoderConfig(
        vocab_size=vocab_size,
        hidden_dim=768,
        n_layers=12,
        n_heads=12,
        ff_dim=3072,
        max_positions=512,
        dropout=0.1,
    )


@dataclass
class Batch:
    """Padded input rows: token ids, 0/1 attention mask, segment ids."""

    token_ids: np.ndarray
    attention_mask: np.ndarray
    segment_ids: np.ndarray

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        self.attention_mask = np.asarray(self.attention_mask, dtype=np.int64)
        self.segment_ids = np.asarray(self.segment_ids, dtype=np.int64)
        if self.token_ids.ndim != 2:
            raise ValueError(f"token_ids must be 2-D, got shape {self.token_ids.shape}")
        for name in ("attention_mask", "segment_ids"):
            arr = getattr(self, name)
            if arr.shape != self.token_ids.shape:
                raise ValueError(
                    f"{name} shape {arr.shape} does not match token_ids {self.token_ids.shape}"
                )
        if not np.isin(self.attention_mask, (0, 1)).all():
            raise ValueError("attention_mask entries must be 0 or 1")

    @property
    def shape(self) -> tuple[int, int]:
        return self.token_ids.shape


def layer_param_names(layer: int) -> list[str]:
    p = f"layer{layer}."
    return [
        p + "attn_q_w", p + "attn_q_b", p + "attn_k_w", p + "attn_k_b",
        p + "attn_v_w", p + "attn_v_b", p + "attn_out_w", p + "attn_out_b",
        p + "attn_ln_g", p + "attn_ln_b",
        p + "ff_in_w", p + "ff_in_b", p + "ff_out_w", p + "ff_out_b",
        p + "ff_ln_g", p + "ff_ln_b",
    ]


def init_params(config: EncoderConfig, seed: int) -> dict[str, np.ndarray]:
    """Weights drawn from N(0, 0.02^2), biases zero, layer-norm scales one."""
    rng = np.random.default_rng(seed)
    std = 0.02
    h, f, v = config.hidden_dim, config.ff_dim, config.vocab_size

    def w(*shape):
        return rng.normal(0.0, std, size=shape)

    params = {
        "tok_emb": w(v, h),
        "pos_emb": w(config.max_positions, h),
        "seg_emb": w(config.n_segments, h),
        "emb_ln_g": np.ones(h),
        "emb_ln_b": np.zeros(h),
        "mlm_w": w(h, v),
        "mlm_b": np.zeros(v),
    }
    for i in range(config.n_layers):
        p = f"layer{i}."
        params[p + "attn_q_w"] = w(h, h)
        params[p + "attn_q_b"] = np.zeros(h)
        params[p + "attn_k_w"] = w(h, h)
        params[p + "attn_k_b"] = np.zeros(h)
        params[p + "attn_v_w"] = w(h, h)
        params[p + "attn_v_b"] = np.zeros(h)
        params[p + "attn_out_w"] = w(h, h)
        params[p + "attn_out_b"] = np.zeros(h)
        params[p + "attn_ln_g"] = np.ones(h)
        params[p + "attn_ln_b"] = np.zeros(h)
        params[p + "ff_in_w"] = w(h, f)
        params[p + "ff_in_b"] = np.zeros(f)
        params[p + "ff_out_w"] = w(f, h)
        params[p + "ff_out_b"] = np.zeros(h)
        params[p + "ff_ln_g"] = np.ones(h)
        params[p + "ff_ln_b"] = np.zeros(h)
    return params


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def _gelu_grad(x):
    return 0.5 * (1.0 + erf(x / math.sqrt(2.0))) + x * np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


def _layer_norm(x, g, b, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv)


def _layer_norm_backward(dy, g, cache):
    xhat, inv = cache
    dg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    db = dy.reshape(-1, xhat.shape[-1]).sum(axis=0)
    dxhat = dy * g
    mean_dxhat = dxhat.mean(axis=-1, keepdims=True)
    mean_dxhat_xhat = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
    return dx, dg, db


def _dropout_mask(rng, shape, rate):
    # inverted dropout: scale at train time so eval needs no correction
    keep = 1.0 - rate
    return (rng.random(shape) < keep).astype(np.float64) / keep


def _split_heads(x, n_heads):
    b, t, h = x.shape
    return x.reshape(b, t, n_heads, h // n_heads).transpose(0, 2, 1, 3)


def _join_heads(x):
    b, nh, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, nh * dh)


def _forward(params, config, batch, train_mode, rng):
    b, t = batch.shape
    if t > config.max_positions:
        raise ValueError(f"sequence length {t} exceeds max_positions {config.max_positions}")
    if batch.token_ids.min() < 0 or batch.token_ids.max() >= config.vocab_size:
        raise ValueError("token id outside vocabulary range")
    if batch.segment_ids.min() < 0 or batch.segment_ids.max() >= config.n_segments:
        raise ValueError("segment id outside segment range")
    use_dropout = train_mode and config.dropout > 0.0
    if use_dropout and rng is None:
        raise ValueError("train_mode with dropout requires an rng")

    cache = {"batch": batch, "use_dropout": use_dropout, "layers": []}
    summed = (
        params["tok_emb"][batch.token_ids]
        + params["pos_emb"][np.arange(t)][None, :, :]
        + params["seg_emb"][batch.segment_ids]
    )
    x, emb_ln = _layer_norm(summed, params["emb_ln_g"], params["emb_ln_b"], config.ln_epsilon)
    if use_dropout:
        m = _dropout_mask(rng, x.shape, config.dropout)
        x = x * m
        cache["emb_drop"] = m
    cache["emb_ln"] = emb_ln

    # additive bias: masked keys get a large negative score, real keys zero
    attn_bias = np.where(batch.attention_mask[:, None, None, :] == 1, 0.0, _NEG_INF)

    scale = 1.0 / math.sqrt(config.head_dim)
    for i in range(config.n_layers):
        p = f"layer{i}."
        lc = {"x_in": x}
        h2 = x.reshape(-1, config.hidden_dim)
        q = (h2 @ params[p + "attn_q_w"] + params[p + "attn_q_b"]).reshape(x.shape)
        k = (h2 @ params[p + "attn_k_w"] + params[p + "attn_k_b"]).reshape(x.shape)
        v = (h2 @ params[p + "attn_v_w"] + params[p + "attn_v_b"]).reshape(x.shape)
        qh, kh, vh = (_split_heads(a, config.n_heads) for a in (q, k, v))
        scores = np.einsum("bhqd,bhkd->bhqk", qh, kh) * scale + attn_bias
        scores -= scores.max(axis=-1, keepdims=True)
        exp = np.exp(scores)
        attn = exp / exp.sum(axis=-1, keepdims=True)
        lc.update(qh=qh, kh=kh, vh=vh)
        if use_dropout:
            m = _dropout_mask(rng, attn.shape, config.dropout)
            attn_used = attn * m
            lc["attn_drop"] = m
        else:
            attn_used = attn
        lc["attn"] = attn
        lc["attn_used"] = attn_used
        ctx = _join_heads(np.einsum("bhqk,bhkd->bhqd", attn_used, vh))
        lc["ctx"] = ctx
        proj = (ctx.reshape(-1, config.hidden_dim) @ params[p + "attn_out_w"]
                + params[p + "attn_out_b"]).reshape(x.shape)
        if use_dropout:
            m = _dropout_mask(rng, proj.shape, config.dropout)
            proj = proj * m
            lc["proj_drop"] = m
        res1 = x + proj
        h1, ln1 = _layer_norm(res1, params[p + "attn_ln_g"], params[p + "attn_ln_b"], config.ln_epsilon)
        lc["ln1"] = ln1
        lc["h1"] = h1

        a = (h1.reshape(-1, config.hidden_dim) @ params[p + "ff_in_w"]
             + params[p + "ff_in_b"]).reshape(b, t, config.ff_dim)
        g = _gelu(a)
        f = (g.reshape(-1, config.ff_dim) @ params[p + "ff_out_w"]
             + params[p + "ff_out_b"]).reshape(b, t, config.hidden_dim)
        if use_dropout:
            m = _dropout_mask(rng, f.shape, config.dropout)
            f = f * m
            lc["ff_drop"] = m
        lc["a"] = a
        lc["g"] = g
        res2 = h1 + f
        x, ln2 = _layer_norm(res2, params[p + "ff_ln_g"], params[p + "ff_ln_b"], config.ln_epsilon)
        lc["ln2"] = ln2
        cache["layers"].append(lc)
    return x, cache


def forward(params, config: EncoderConfig, batch: Batch, train_mode: bool = False, rng=None) -> np.ndarray:
    """Hidden states [batch, positions, hidden_dim]."""
    hidden, _ = _forward(params, config, batch, train_mode, rng)
    return hidden


def attention_weights(params, config: EncoderConfig, batch: Batch) -> list[np.ndarray]:
    """Per-layer softmax attention maps [batch, heads, query, key] (eval mode)."""
    _, cache = _forward(params, config, batch, False, None)
    return [lc["attn"] for lc in cache["layers"]]


def _backward(params, config, cache, d_hidden):
    batch = cache["batch"]
    b, t = batch.shape
    h = config.hidden_dim
    grads = {name: np.zeros_like(arr) for name, arr in params.items()}
    scale = 1.0 / math.sqrt(config.head_dim)
    dx = d_hidden

    for i in reversed(range(config.n_layers)):
        p = f"layer{i}."
        lc = cache["layers"][i]

        d_res2, dg_ln, db_ln = _layer_norm_backward(dx, params[p + "ff_ln_g"], lc["ln2"])
        grads[p + "ff_ln_g"] += dg_ln
        grads[p + "ff_ln_b"] += db_ln
        d_h1 = d_res2.copy()
        d_f = d_res2
        if "ff_drop" in lc:
            d_f = d_f * lc["ff_drop"]
        d_f2 = d_f.reshape(-1, h)
        grads[p + "ff_out_w"] += lc["g"].reshape(-1, config.ff_dim).T @ d_f2
        grads[p + "ff_out_b"] += d_f2.sum(axis=0)
        d_g = (d_f2 @ params[p + "ff_out_w"].T).reshape(b, t, config.ff_dim)
        d_a = d_g * _gelu_grad(lc["a"])
        d_a2 = d_a.reshape(-1, config.ff_dim)
        grads[p + "ff_in_w"] += lc["h1"].reshape(-1, h).T @ d_a2
        grads[p + "ff_in_b"] += d_a2.sum(axis=0)
        d_h1 += (d_a2 @ params[p + "ff_in_w"].T).reshape(b, t, h)

        d_res1, dg_ln, db_ln = _layer_norm_backward(d_h1, params[p + "attn_ln_g"], lc["ln1"])
        grads[p + "attn_ln_g"] += dg_ln
        grads[p + "attn_ln_b"] += db_ln
        dx = d_res1.copy()
        d_proj = d_res1
        if "proj_drop" in lc:
            d_proj = d_proj * lc["proj_drop"]
        d_proj2 = d_proj.reshape(-1, h)
        grads[p + "attn_out_w"] += lc["ctx"].reshape(-1, h).T @ d_proj2
        grads[p + "attn_out_b"] += d_proj2.sum(axis=0)
        d_ctx = _split_heads((d_proj2 @ params[p + "attn_out_w"].T).reshape(b, t, h), config.n_heads)

        d_attn_used = np.einsum("bhqd,bhkd->bhqk", d_ctx, lc["vh"])
        d_vh = np.einsum("bhqk,bhqd->bhkd", lc["attn_used"], d_ctx)
        if "attn_drop" in lc:
            d_attn = d_attn_used * lc["attn_drop"]
        else:
            d_attn = d_attn_used
        attn = lc["attn"]
        d_scores = attn * (d_attn - (d_attn * attn).sum(axis=-1, keepdims=True))
        d_qh = np.einsum("bhqk,bhkd->bhqd", d_scores, lc["kh"]) * scale
        d_kh = np.einsum("bhqk,bhqd->bhkd", d_scores, lc["qh"]) * scale

        x_in2 = lc["x_in"].reshape(-1, h)
        for name, d_head in (("attn_q", d_qh), ("attn_k", d_kh), ("attn_v", d_vh)):
            d_flat = _join_heads(d_head).reshape(-1, h)
            grads[p + name + "_w"] += x_in2.T @ d_flat
            grads[p + name + "_b"] += d_flat.sum(axis=0)
            dx += (d_flat @ params[p + name + "_w"].T).reshape(b, t, h)

    if "emb_drop" in cache:
        dx = dx * cache["emb_drop"]
    d_sum, dg_ln, db_ln = _layer_norm_backward(dx, params["emb_ln_g"], cache["emb_ln"])
    grads["emb_ln_g"] += dg_ln
    grads["emb_ln_b"] += db_ln
    flat = d_sum.reshape(-1, h)
    np.add.at(grads["tok_emb"], batch.token_ids.ravel(), flat)
    grads["pos_emb"][:t] += d_sum.sum(axis=0)
    np.add.at(grads["seg_emb"], batch.segment_ids.ravel(), flat)
    return grads


def _softmax_rows(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def _cross_entropy(logits, target_ids):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1))
    picked = shifted[np.arange(len(target_ids)), target_ids]
    return logz - picked


def mlm_forward_loss(params, config, batch, target_positions, target_ids,
                     train_mode=False, rng=None):
    """Masked-token prediction loss and exact gradients.

    target_positions is an [n, 2] array of (row, position) pairs pointing at
    the corrupted slots; target_ids holds the original token at each. The
    loss is the mean cross-entropy over all targets.
    """
    target_positions = np.asarray(target_positions, dtype=np.int64).reshape(-1, 2)
    target_ids = np.asarray(target_ids, dtype=np.int64)
    n = len(target_ids)
    if n == 0:
        raise ValueError("mlm loss needs at least one target position")
    if target_positions.shape[0] != n:
        raise ValueError("target_positions and target_ids lengths differ")
    b, t = batch.shape
    rows, cols = target_positions[:, 0], target_positions[:, 1]
    if rows.min() < 0 or rows.max() >= b or cols.min() < 0 or cols.max() >= t:
        raise ValueError("target position outside the batch")

    hidden, cache = _forward(params, config, batch, train_mode, rng)
    h_t = hidden[rows, cols]
    logits = h_t @ params["mlm_w"] + params["mlm_b"]
    loss = float(_cross_entropy(logits, target_ids).mean())

    d_logits = _softmax_rows(logits)
    d_logits[np.arange(n), target_ids] -= 1.0
    d_logits /= n
    d_hidden = np.zeros_like(hidden)
    np.add.at(d_hidden, (rows, cols), d_logits @ params["mlm_w"].T)
    grads = _backward(params, config, cache, d_hidden)
    grads["mlm_w"] += h_t.T @ d_logits
    grads["mlm_b"] += d_logits.sum(axis=0)
    return loss, grads


def init_token_head(params, config, n_labels, seed):
    """Copy of params with a per-position classification head added."""
    if n_labels < 1:
        raise ValueError(f"n_labels must be >= 1, got {n_labels}")
    rng = np.random.default_rng(seed)
    out = dict(params)
    out["head_token_w"] = rng.normal(0.0, 0.02, size=(config.hidden_dim, n_labels))
    out["head_token_b"] = np.zeros(n_labels)
    return out


def init_pair_head(params, config, n_classes, seed):
    """Copy of params with a first-position (summary vector) classifier added."""
    if n_classes < 1:
        raise ValueError(f"n_classes must be >= 1, got {n_classes}")
    rng = np.random.default_rng(seed)
    out = dict(params)
    out["head_pair_w"] = rng.normal(0.0, 0.02, size=(config.hidden_dim, n_classes))
    out["head_pair_b"] = np.zeros(n_classes)
    return out


def init_multilabel_head(params, config, n_labels, seed):
    """Copy of params with an independent per-label sigmoid head added."""
    if n_labels < 1:
        raise ValueError(f"n_labels must be >= 1, got {n_labels}")
    rng = np.random.default_rng(seed)
    out = dict(params)
    out["head_multi_w"] = rng.normal(0.0, 0.02, size=(config.hidden_dim, n_labels))
    out["head_multi_b"] = np.zeros(n_labels)
    return out


def head_token_classify(params, hidden, n_labels):
    """Per-position label logits [batch, positions, n_labels]."""
    if n_labels < 1:
        raise ValueError(f"n_labels must be >= 1, got {n_labels}")
    w = params["head_token_w"]
    if w.shape[1] != n_labels:
        raise ValueError(f"head was built for {w.shape[1]} labels, asked for {n_labels}")
    return hidden @ w + params["head_token_b"]


def head_pair_classify(params, hidden):
    """Sequence-level class logits [batch, n_classes] from the first position."""
    return hidden[:, 0, :] @ params["head_pair_w"] + params["head_pair_b"]


def head_multilabel(params, hidden, n_labels):
    """Independent per-label probabilities [batch, n_labels] via the logistic
    function on first-position scores."""
    if n_labels < 1:
        raise ValueError(f"n_labels must be >= 1, got {n_labels}")
    w = params["head_multi_w"]
    if w.shape[1] != n_labels:
        raise ValueError(f"head was built for {w.shape[1]} labels, asked for {n_labels}")
    z = hidden[:, 0, :] @ w + params["head_multi_b"]
    return 1.0 / (1.0 + np.exp(-z))


def token_classify_loss(params, config, batch, label_ids, loss_mask,
                        train_mode=False, rng=None):
    """Mean cross-entropy over positions with loss_mask 1; everything else
    (padding, specials, continuation pieces) contributes nothing, so their
    label values are irrelevant."""
    label_ids = np.asarray(label_ids, dtype=np.int64)
    loss_mask = np.asarray(loss_mask)
    if label_ids.shape != batch.shape or loss_mask.shape != batch.shape:
        raise ValueError("label_ids and loss_mask must match the batch shape")
    rows, cols = np.nonzero(loss_mask)
    if len(rows) == 0:
        raise ValueError("loss_mask selects no positions")
    n_labels = params["head_token_w"].shape[1]
    targets = label_ids[rows, cols]
    if targets.min() < 0 or targets.max() >= n_labels:
        raise ValueError("label id outside the head's label range")

    hidden, cache = _forward(params, config, batch, train_mode, rng)
    h_t = hidden[rows, cols]
    logits = h_t @ params["head_token_w"] + params["head_token_b"]
    loss = float(_cross_entropy(logits, targets).mean())

    n = len(rows)
    d_logits = _softmax_rows(logits)
    d_logits[np.arange(n), targets] -= 1.0
    d_logits /= n
    d_hidden = np.zeros_like(hidden)
    np.add.at(d_hidden, (rows, cols), d_logits @ params["head_token_w"].T)
    grads = _backward(params, config, cache, d_hidden)
    grads["head_token_w"] = h_t.T @ d_logits
    grads["head_token_b"] = d_logits.sum(axis=0)
    return loss, grads


def pair_classify_loss(params, config, batch, class_ids, train_mode=False, rng=None):
    """Mean cross-entropy of first-position class logits over the batch."""
    class_ids = np.asarray(class_ids, dtype=np.int64)
    b, _ = batch.shape
    if class_ids.shape != (b,):
        raise ValueError(f"class_ids must have shape ({b},), got {class_ids.shape}")
    n_classes = params["head_pair_w"].shape[1]
    if class_ids.min() < 0 or class_ids.max() >= n_classes:
        raise ValueError("class id outside the head's class range")

    hidden, cache = _forward(params, config, batch, train_mode, rng)
    h0 = hidden[:, 0, :]
    logits = h0 @ params["head_pair_w"] + params["head_pair_b"]
    loss = float(_cross_entropy(logits, class_ids).mean())

    d_logits = _softmax_rows(logits)
    d_logits[np.arange(b), class_ids] -= 1.0
    d_logits /= b
    d_hidden = np.zeros_like(hidden)
    d_hidden[:, 0, :] = d_logits @ params["head_pair_w"].T
    grads = _backward(params, config, cache, d_hidden)
    grads["head_pair_w"] = h0.T @ d_logits
    grads["head_pair_b"] = d_logits.sum(axis=0)
    return loss, grads


def multilabel_loss(params, config, batch, label_matrix, train_mode=False, rng=None):
    """Mean binary cross-entropy over every (example, label) cell."""
    y = np.asarray(label_matrix, dtype=np.float64)
    b, _ = batch.shape
    n_labels = params["head_multi_w"].shape[1]
    if y.shape != (b, n_labels):
        raise ValueError(f"label_matrix must have shape ({b}, {n_labels}), got {y.shape}")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("label_matrix entries must be 0 or 1")

    hidden, cache = _forward(params, config, batch, train_mode, rng)
    h0 = hidden[:, 0, :]
    z = h0 @ params["head_multi_w"] + params["head_multi_b"]
    # log(1 + e^z) - y*z, computed stably
    loss = float((np.logaddexp(0.0, z) - y * z).mean())

    d_z = (1.0 / (1.0 + np.exp(-z)) - y) / y.size
    d_hidden = np.zeros_like(hidden)
    d_hidden[:, 0, :] = d_z @ params["head_multi_w"].T
    grads = _backward(params, config, cache, d_hidden)
    grads["head_multi_w"] = h0.T @ d_z
    grads["head_multi_b"] = d_z.sum(axis=0)
    return loss, grads


def save_checkpoint(path, config: EncoderConfig, params) -> None:
    """Self-describing container: one JSON header line with the config and
    tensor manifest, then raw little-endian float64 tensor bytes in manifest
    order. Identical state always produces identical bytes."""
    names = sorted(params)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(config),
        "tensors": [{"name": n, "shape": list(params[n].shape)} for n in names],
    }
    with open(path, "wb") as handle:
        handle.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8"))
        handle.write(b"\n")
        for name in names:
            handle.write(np.ascontiguousarray(params[name], dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[EncoderConfig, dict[str, np.ndarray]]:
    with open(path, "rb") as handle:
        header_line = handle.readline()
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: not a checkpoint (bad header)") from exc
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unrecognized checkpoint format")
        config = EncoderConfig(**header["config"])
        params = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = handle.read(count * 8)
            if len(raw) != count * 8:
                raise ValueError(f"{path}: truncated tensor {entry['name']}")
            params[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        if handle.read(1):
            raise ValueError(f"{path}: trailing bytes after last tensor")
    return config, params
