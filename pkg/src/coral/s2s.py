"""Transformer encoder-decoder policy.

Computes per-step response log-probabilities under teacher forcing and
decodes greedily or by nucleus sampling. Single-example forward passes;
the trainer batches by averaging per-example losses over shared parameters.

Architecture notes: pre-layer-norm residual blocks, learned positional
embeddings, decoder input embedding tied to the output projection (the
token table is shared with the encoder as well).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .backend import (
    ParameterStore,
    Tensor,
    dropout,
    embedding,
    gather_last,
    gelu,
    layer_norm,
    log_softmax,
    masked_fill,
    matmul,
    reshape,
    softmax,
    transpose,
)
from .corpus import BOS, EOS, PAD

MASK_VALUE = -1e9


@dataclass
class S2SConfig:
    vocab_size: int
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 128
    max_context_len: int = 64
    max_response_len: int = 16
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")

    @property
    def d_ff(self) -> int:
        return 4 * self.d_model

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class DecodeResult:
    """Decoded ids (EOS-terminated unless the length cap hit) and their
    per-step log-probabilities from a teacher-forced replay."""

    token_ids: list[int]
    logprobs: np.ndarray


def init_s2s_params(cfg: S2SConfig, rng: np.random.Generator, prefix: str = "s2s") -> ParameterStore:
    params = ParameterStore()
    d, ff = cfg.d_model, cfg.d_ff

    def normal(*shape):
        return rng.normal(0.0, 0.02, size=shape).astype(np.float32)

    params.add(f"{prefix}.tok_emb", normal(cfg.vocab_size, d))
    params.add(f"{prefix}.pos_enc", normal(cfg.max_context_len, d))
    params.add(f"{prefix}.pos_dec", normal(cfg.max_response_len, d))

    def add_ln(name):
        params.add(f"{name}.g", np.ones(d, dtype=np.float32))
        params.add(f"{name}.b", np.zeros(d, dtype=np.float32))

    def add_attn(name):
        for w in ("wq", "wk", "wv", "wo"):
            params.add(f"{name}.{w}", normal(d, d))

    def add_ff(name):
        params.add(f"{name}.w1", normal(d, ff))
        params.add(f"{name}.b1", np.zeros(ff, dtype=np.float32))
        params.add(f"{name}.w2", normal(ff, d))
        params.add(f"{name}.b2", np.zeros(d, dtype=np.float32))

    for i in range(cfg.n_layers):
        add_ln(f"{prefix}.enc.{i}.ln1")
        add_attn(f"{prefix}.enc.{i}.attn")
        add_ln(f"{prefix}.enc.{i}.ln2")
        add_ff(f"{prefix}.enc.{i}.ff")
    add_ln(f"{prefix}.enc.ln_f")
    for i in range(cfg.n_layers):
        add_ln(f"{prefix}.dec.{i}.ln1")
        add_attn(f"{prefix}.dec.{i}.self")
        add_ln(f"{prefix}.dec.{i}.ln2")
        add_attn(f"{prefix}.dec.{i}.cross")
        add_ln(f"{prefix}.dec.{i}.ln3")
        add_ff(f"{prefix}.dec.{i}.ff")
    add_ln(f"{prefix}.dec.ln_f")
    return params


def _split_heads(x: Tensor, n_heads: int, head_dim: int) -> Tensor:
    # (T, d) -> (h, T, dh)
    t = x.shape[0]
    return transpose(reshape(x, (t, n_heads, head_dim)), (1, 0, 2))


def _merge_heads(x: Tensor) -> Tensor:
    # (h, T, dh) -> (T, d)
    h, t, dh = x.shape
    return reshape(transpose(x, (1, 0, 2)), (t, h * dh))


def _attention(q_in: Tensor, kv_in: Tensor, params, name: str, cfg: S2SConfig, mask: np.ndarray | None) -> Tensor:
    q = _split_heads(matmul(q_in, params[f"{name}.wq"]), cfg.n_heads, cfg.head_dim)
    k = _split_heads(matmul(kv_in, params[f"{name}.wk"]), cfg.n_heads, cfg.head_dim)
    v = _split_heads(matmul(kv_in, params[f"{name}.wv"]), cfg.n_heads, cfg.head_dim)
    scores = matmul(q, transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(cfg.head_dim))
    if mask is not None:
        scores = masked_fill(scores, mask, MASK_VALUE)
    attn = softmax(scores, axis=-1)
    return matmul(_merge_heads(matmul(attn, v)), params[f"{name}.wo"])


def _ff(x: Tensor, params, name: str) -> Tensor:
    h = gelu(matmul(x, params[f"{name}.w1"]) + params[f"{name}.b1"])
    return matmul(h, params[f"{name}.w2"]) + params[f"{name}.b2"]


def _ln(x: Tensor, params, name: str) -> Tensor:
    return layer_norm(x, params[f"{name}.g"], params[f"{name}.b"])


def _maybe_dropout(x: Tensor, cfg: S2SConfig, rng: np.random.Generator | None) -> Tensor:
    if rng is None or cfg.dropout <= 0.0:
        return x
    return dropout(x, cfg.dropout, rng)


def encode(
    context_ids,
    params: ParameterStore,
    cfg: S2SConfig,
    prefix: str = "s2s",
    train_rng: np.random.Generator | None = None,
) -> Tensor:
    """Contextual states (L, d). PAD positions are masked out of attention
    as keys, so non-pad outputs are independent of pad content."""
    ids = list(context_ids)
    if not ids:
        raise ValueError("empty context")
    if len(ids) > cfg.max_context_len:
        raise ValueError(f"context length {len(ids)} exceeds max_context_len {cfg.max_context_len}")
    pad_keys = np.array([i == PAD for i in ids], dtype=bool)
    mask = pad_keys[None, None, :] if pad_keys.any() else None

    pos = embedding(params[f"{prefix}.pos_enc"], np.arange(len(ids)))
    x = embedding(params[f"{prefix}.tok_emb"], ids) + pos
    for i in range(cfg.n_layers):
        name = f"{prefix}.enc.{i}"
        a = _ln(x, params, f"{name}.ln1")
        x = x + _maybe_dropout(_attention(a, a, params, f"{name}.attn", cfg, mask), cfg, train_rng)
        x = x + _maybe_dropout(_ff(_ln(x, params, f"{name}.ln2"), params, f"{name}.ff"), cfg, train_rng)
    return _ln(x, params, f"{prefix}.enc.ln_f")


def _decoder_logits(
    input_ids: list[int],
    memory: Tensor,
    memory_pad: np.ndarray | None,
    params: ParameterStore,
    cfg: S2SConfig,
    prefix: str = "s2s",
    train_rng: np.random.Generator | None = None,
) -> Tensor:
    t = len(input_ids)
    if t > cfg.max_response_len:
        raise ValueError(f"decoder length {t} exceeds max_response_len {cfg.max_response_len}")
    causal = np.triu(np.ones((t, t), dtype=bool), k=1)[None, :, :]
    cross_mask = memory_pad[None, None, :] if memory_pad is not None else None

    pos = embedding(params[f"{prefix}.pos_dec"], np.arange(t))
    x = embedding(params[f"{prefix}.tok_emb"], input_ids) + pos
    for i in range(cfg.n_layers):
        name = f"{prefix}.dec.{i}"
        a = _ln(x, params, f"{name}.ln1")
        x = x + _maybe_dropout(_attention(a, a, params, f"{name}.self", cfg, causal), cfg, train_rng)
        q = _ln(x, params, f"{name}.ln2")
        x = x + _maybe_dropout(_attention(q, memory, params, f"{name}.cross", cfg, cross_mask), cfg, train_rng)
        x = x + _maybe_dropout(_ff(_ln(x, params, f"{name}.ln3"), params, f"{name}.ff"), cfg, train_rng)
    x = _ln(x, params, f"{prefix}.dec.ln_f")
    return matmul(x, transpose(params[f"{prefix}.tok_emb"]))


def sequence_logprobs(
    context_ids,
    target_ids,
    params: ParameterStore,
    cfg: S2SConfig,
    prefix: str = "s2s",
    train_rng: np.random.Generator | None = None,
) -> Tensor:
    """log P(target_t | target_<t, context) for the exact given sequence.

    The target is taken verbatim (no terminator appended); decoder input is
    the BOS-shifted target.
    """
    targets = list(target_ids)
    if not targets:
        raise ValueError("empty target sequence")
    context_ids = list(context_ids)
    memory = encode(context_ids, params, cfg, prefix=prefix, train_rng=train_rng)
    memory_pad = np.array([i == PAD for i in context_ids], dtype=bool)
    memory_pad = memory_pad if memory_pad.any() else None
    input_ids = [BOS] + targets[:-1]
    logits = _decoder_logits(input_ids, memory, memory_pad, params, cfg, prefix=prefix, train_rng=train_rng)
    return gather_last(log_softmax(logits, axis=-1), targets)


def response_logprobs(context_ids, response_ids, params: ParameterStore, cfg: S2SConfig, prefix: str = "s2s") -> Tensor:
    """Teacher-forced log-probabilities of a response, EOS appended (T = len + 1)."""
    response_ids = list(response_ids)
    if not response_ids:
        raise ValueError("empty response")
    return sequence_logprobs(context_ids, response_ids + [EOS], params, cfg, prefix=prefix)


def _step_distribution(logits_row: np.ndarray) -> np.ndarray:
    z = logits_row.astype(np.float64)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def greedy_decode(context_ids, params: ParameterStore, cfg: S2SConfig, t_max: int = 0, prefix: str = "s2s") -> DecodeResult:
    """Argmax decoding (ties -> lowest id); stops at EOS or t_max tokens."""
    return _decode(context_ids, params, cfg, t_max, prefix, sampler=None, rng=None)


def nucleus_decode(
    context_ids,
    params: ParameterStore,
    cfg: S2SConfig,
    top_p: float,
    t_max: int = 0,
    rng: np.random.Generator | None = None,
    prefix: str = "s2s",
) -> DecodeResult:
    """Top-p sampling: smallest probability-sorted prefix with mass >= top_p,
    renormalized."""
    if not 0.0 < top_p <= 1.0:
        raise ValueError(f"top_p must be in (0, 1], got {top_p}")
    rng = rng or np.random.default_rng()
    return _decode(context_ids, params, cfg, t_max, prefix, sampler=top_p, rng=rng)


def _decode(context_ids, params, cfg, t_max, prefix, sampler, rng) -> DecodeResult:
    t_max = t_max or cfg.max_response_len
    if not 1 <= t_max <= cfg.max_response_len:
        raise ValueError(f"t_max must be in [1, {cfg.max_response_len}], got {t_max}")
    frozen = params.detached()
    context_ids = list(context_ids)
    memory = encode(context_ids, frozen, cfg, prefix=prefix)
    memory_pad = np.array([i == PAD for i in context_ids], dtype=bool)
    memory_pad = memory_pad if memory_pad.any() else None

    tokens: list[int] = []
    for _ in range(t_max):
        logits = _decoder_logits([BOS] + tokens, memory, memory_pad, frozen, cfg, prefix=prefix)
        dist = _step_distribution(logits.data[-1])
        if sampler is None:
            next_id = int(dist.argmax())
        else:
            next_id = nucleus_sample(dist, sampler, rng)
        tokens.append(next_id)
        if next_id == EOS:
            break
    logprobs = sequence_logprobs(context_ids, tokens, frozen, cfg, prefix=prefix).data.copy()
    return DecodeResult(token_ids=tokens, logprobs=logprobs)


def nucleus_filter(probs: np.ndarray, top_p: float) -> np.ndarray:
    """Zero out everything outside the smallest top-p mass set and renormalize.

    Sorting is by descending probability with ties broken by lower id; the
    boundary token is included so the kept mass is >= top_p.
    """
    p = np.asarray(probs, dtype=np.float64)
    order = np.argsort(-p, kind="stable")
    csum = np.cumsum(p[order])
    cut = min(int(np.searchsorted(csum, top_p, side="left")), len(p) - 1)
    kept = np.zeros_like(p)
    keep_idx = order[: cut + 1]
    kept[keep_idx] = p[keep_idx]
    return kept / kept.sum()


def nucleus_sample(probs: np.ndarray, top_p: float, rng: np.random.Generator) -> int:
    filtered = nucleus_filter(probs, top_p)
    return int(rng.choice(len(filtered), p=filtered))
