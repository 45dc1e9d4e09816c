"""Context-response compatibility scorer and the retrieval reward.

The scorer follows the ESIM skeleton: embed both sequences, encode each
with a bidirectional GRU, soft cross-attention alignment, enhancement
features [a; a~; a - a~; a * a~], a second (composition) bi-GRU, max+avg
pooling over time, and a two-hidden-layer MLP with a sigmoid output.
GRUs stand in for the usual LSTMs to keep the backend op set small.

Any object with ``score(context_ids, response_ids) -> float in [0, 1]``
can replace `EsimScorer` as the reward environment.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .backend import (
    OptimizerState,
    ParameterStore,
    Tensor,
    adam_step,
    avg_pool_time,
    concat,
    embedding,
    matmul,
    max_pool_time,
    mean,
    mul,
    reshape,
    sigmoid,
    softmax,
    softplus,
    sub,
    tanh,
    transpose,
)
from .corpus import TrainingPair, UtterancePool, sample_negative


@dataclass
class EsimConfig:
    vocab_size: int
    embed_dim: int = 64
    hidden_dim: int = 64
    mlp_hidden: tuple[int, int] = (128, 64)
    dropout: float = 0.0

    def __post_init__(self):
        if min(self.embed_dim, self.hidden_dim, *self.mlp_hidden) < 1:
            raise ValueError("all dimensions must be >= 1")


def _add_gru(params: ParameterStore, name: str, d_in: int, d_hidden: int, rng: np.random.Generator) -> None:
    scale = 1.0 / np.sqrt(d_hidden)
    for gate in ("z", "r", "n"):
        params.add(f"{name}.w{gate}", rng.uniform(-scale, scale, size=(d_in, d_hidden)).astype(np.float32))
        params.add(f"{name}.u{gate}", rng.uniform(-scale, scale, size=(d_hidden, d_hidden)).astype(np.float32))
        params.add(f"{name}.b{gate}", np.zeros(d_hidden, dtype=np.float32))


def init_esim_params(cfg: EsimConfig, rng: np.random.Generator, prefix: str = "esim") -> ParameterStore:
    params = ParameterStore()
    params.add(f"{prefix}.emb", rng.normal(0.0, 0.1, size=(cfg.vocab_size, cfg.embed_dim)).astype(np.float32))
    for direction in ("f", "b"):
        _add_gru(params, f"{prefix}.enc.{direction}", cfg.embed_dim, cfg.hidden_dim, rng)
        _add_gru(params, f"{prefix}.comp.{direction}", 8 * cfg.hidden_dim, cfg.hidden_dim, rng)
    m1, m2 = cfg.mlp_hidden
    scale = 0.05
    params.add(f"{prefix}.mlp.w1", rng.uniform(-scale, scale, size=(8 * cfg.hidden_dim, m1)).astype(np.float32))
    params.add(f"{prefix}.mlp.b1", np.zeros(m1, dtype=np.float32))
    params.add(f"{prefix}.mlp.w2", rng.uniform(-scale, scale, size=(m1, m2)).astype(np.float32))
    params.add(f"{prefix}.mlp.b2", np.zeros(m2, dtype=np.float32))
    params.add(f"{prefix}.mlp.w3", rng.uniform(-scale, scale, size=(m2, 1)).astype(np.float32))
    params.add(f"{prefix}.mlp.b3", np.zeros(1, dtype=np.float32))
    return params


def _gru_direction(x: Tensor, params: ParameterStore, name: str, d_hidden: int) -> Tensor:
    """One GRU direction over x (T, d_in) -> (T, d_hidden)."""
    t_len = x.shape[0]
    # Input projections for the whole sequence at once.
    xz = matmul(x, params[f"{name}.wz"]) + params[f"{name}.bz"]
    xr = matmul(x, params[f"{name}.wr"]) + params[f"{name}.br"]
    xn = matmul(x, params[f"{name}.wn"]) + params[f"{name}.bn"]
    h = Tensor(np.zeros((1, d_hidden), dtype=x.data.dtype))
    rows = []
    for t in range(t_len):
        z = sigmoid(embedding(xz, [t]) + matmul(h, params[f"{name}.uz"]))
        r = sigmoid(embedding(xr, [t]) + matmul(h, params[f"{name}.ur"]))
        n = tanh(embedding(xn, [t]) + mul(r, matmul(h, params[f"{name}.un"])))
        # h' = (1 - z) * n + z * h
        h = n + mul(z, sub(h, n))
        rows.append(h)
    return concat(rows, axis=0)


def _bi_gru(x: Tensor, params: ParameterStore, name: str, d_hidden: int) -> Tensor:
    """(T, d_in) -> (T, 2 * d_hidden), forward and reversed passes concatenated."""
    t_len = x.shape[0]
    fwd = _gru_direction(x, params, f"{name}.f", d_hidden)
    rev_ids = list(range(t_len - 1, -1, -1))
    bwd = embedding(_gru_direction(embedding(x, rev_ids), params, f"{name}.b", d_hidden), rev_ids)
    return concat([fwd, bwd], axis=-1)


def esim_logit(context_ids, response_ids, params: ParameterStore, cfg: EsimConfig, prefix: str = "esim") -> Tensor:
    """Pre-sigmoid compatibility score as a scalar tensor."""
    context_ids = list(context_ids)
    response_ids = list(response_ids)
    if not context_ids or not response_ids:
        raise ValueError("esim inputs must be non-empty")

    a = _bi_gru(embedding(params[f"{prefix}.emb"], context_ids), params, f"{prefix}.enc", cfg.hidden_dim)
    b = _bi_gru(embedding(params[f"{prefix}.emb"], response_ids), params, f"{prefix}.enc", cfg.hidden_dim)

    scores = matmul(a, transpose(b))
    a_tilde = matmul(softmax(scores, axis=-1), b)
    b_tilde = matmul(softmax(transpose(scores), axis=-1), a)

    def enhance(x, x_tilde):
        return concat([x, x_tilde, sub(x, x_tilde), mul(x, x_tilde)], axis=-1)

    va = _bi_gru(enhance(a, a_tilde), params, f"{prefix}.comp", cfg.hidden_dim)
    vb = _bi_gru(enhance(b, b_tilde), params, f"{prefix}.comp", cfg.hidden_dim)

    pooled = concat([avg_pool_time(va), max_pool_time(va), avg_pool_time(vb), max_pool_time(vb)], axis=0)
    h = reshape(pooled, (1, -1))
    h = tanh(matmul(h, params[f"{prefix}.mlp.w1"]) + params[f"{prefix}.mlp.b1"])
    h = tanh(matmul(h, params[f"{prefix}.mlp.w2"]) + params[f"{prefix}.mlp.b2"])
    out = matmul(h, params[f"{prefix}.mlp.w3"]) + params[f"{prefix}.mlp.b3"]
    return reshape(out, ())


def esim_score(context_ids, response_ids, params: ParameterStore, cfg: EsimConfig, prefix: str = "esim") -> float:
    return sigmoid(esim_logit(context_ids, response_ids, params, cfg, prefix=prefix)).item()


class EsimScorer:
    """Frozen scorer: score(context_ids, response_ids) -> sigmoid output in (0, 1)."""

    def __init__(self, params: ParameterStore, cfg: EsimConfig, prefix: str = "esim"):
        self.cfg = cfg
        self.prefix = prefix
        self._frozen = params.detached()

    def score(self, context_ids, response_ids) -> float:
        return esim_score(context_ids, response_ids, self._frozen, self.cfg, prefix=self.prefix)


def retrieval_reward(scorer, context_ids, response_ids, margin: float) -> float:
    """Scorer output minus the margin: negative exactly when the score is
    below the margin."""
    if not 0.0 <= margin <= 1.0:
        raise ValueError(f"margin must be in [0, 1], got {margin}")
    return scorer.score(context_ids, response_ids) - margin


def save_scorer(path, params: ParameterStore, cfg: EsimConfig) -> None:
    """Checkpoint the scorer with enough metadata to rebuild it."""
    from .backend import save_arrays

    arrays: dict[str, np.ndarray] = {name: p.data for name, p in params.items()}
    meta = {
        "vocab_size": cfg.vocab_size,
        "embed_dim": cfg.embed_dim,
        "hidden_dim": cfg.hidden_dim,
        "mlp_hidden_1": cfg.mlp_hidden[0],
        "mlp_hidden_2": cfg.mlp_hidden[1],
    }
    for key, value in meta.items():
        arrays[f"meta.{key}"] = np.array([value], dtype=np.float32)
    save_arrays(path, arrays)


def load_scorer(path, prefix: str = "esim") -> tuple[EsimScorer, ParameterStore, EsimConfig]:
    from .backend import load_arrays

    arrays = load_arrays(path)
    meta = {k[len("meta.") :]: int(v[0]) for k, v in arrays.items() if k.startswith("meta.")}
    cfg = EsimConfig(
        vocab_size=meta["vocab_size"],
        embed_dim=meta["embed_dim"],
        hidden_dim=meta["hidden_dim"],
        mlp_hidden=(meta["mlp_hidden_1"], meta["mlp_hidden_2"]),
    )
    params = init_esim_params(cfg, np.random.default_rng(0), prefix=prefix)
    params.load_values({k: v for k, v in arrays.items() if not k.startswith("meta.")})
    return EsimScorer(params, cfg, prefix=prefix), params, cfg


def roc_auc(labels, scores) -> float:
    """Rank-based AUC with midrank tie handling."""
    labels = np.asarray(labels, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    pos_rank_sum = ranks[labels == 1].sum()
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def _bce_loss(logit: Tensor, label: int) -> Tensor:
    # -log sigmoid(s) = softplus(-s); -log(1 - sigmoid(s)) = softplus(s)
    return softplus(mul(logit, -1.0)) if label == 1 else softplus(logit)


def validation_auc(
    params: ParameterStore,
    cfg: EsimConfig,
    val_pairs: list[TrainingPair],
    pool: UtterancePool,
    rng: np.random.Generator,
    negatives: int = 9,
    prefix: str = "esim",
) -> float:
    """AUC over 1 positive + `negatives` random pool candidates per context."""
    scorer = EsimScorer(params, cfg, prefix=prefix)
    labels: list[int] = []
    scores: list[float] = []
    for pair in val_pairs:
        labels.append(1)
        scores.append(scorer.score(pair.context.flat, pair.response.token_ids))
        for _ in range(negatives):
            neg = sample_negative(pool, rng)
            labels.append(0)
            scores.append(scorer.score(pair.context.flat, neg.token_ids))
    return roc_auc(labels, scores)


def train_retrieval(
    pairs: list[TrainingPair],
    pool: UtterancePool,
    cfg: EsimConfig,
    epochs: int,
    rng: np.random.Generator,
    val_pairs: list[TrainingPair] | None = None,
    negatives_per_positive: int = 1,
    lr: float = 1e-3,
    patience: int = 3,
    batch_size: int = 16,
    shuffle_labels: bool = False,
    log=None,
    prefix: str = "esim",
):
    """Binary cross-entropy training: label 1 for dataset pairs, 0 for pairs
    with a uniformly sampled pool utterance. Early stops on validation AUC.

    shuffle_labels randomly permutes the labels each epoch — a control run
    whose AUC should sit at chance.

    Returns (best params, history) where history rows are dicts with
    epoch / train_loss / val_auc / seconds.
    """
    if not pairs:
        raise ValueError("no training pairs")
    params = init_esim_params(cfg, rng, prefix=prefix)
    opt = OptimizerState(params, peak_lr=lr, warmup_steps=0, total_steps=0, clip_norm=1.0)
    best = params.copy()
    best_auc = -1.0
    since_best = 0
    history: list[dict] = []

    for epoch in range(1, epochs + 1):
        t0 = time.time()
        examples: list[tuple[TrainingPair, list[int], int]] = []
        for pair in pairs:
            examples.append((pair, pair.response.token_ids, 1))
            for _ in range(negatives_per_positive):
                examples.append((pair, sample_negative(pool, rng).token_ids, 0))
        order = rng.permutation(len(examples))
        if shuffle_labels:
            label_perm = rng.permutation(len(examples))
            labels = [examples[i][2] for i in range(len(examples))]
            examples = [(examples[i][0], examples[i][1], labels[label_perm[i]]) for i in range(len(examples))]

        total_loss = 0.0
        batch_losses: list[Tensor] = []
        for idx in order:
            pair, resp_ids, label = examples[idx]
            logit = esim_logit(pair.context.flat, resp_ids, params, cfg, prefix=prefix)
            batch_losses.append(_bce_loss(logit, label))
            if len(batch_losses) == batch_size:
                total_loss += _flush_batch(batch_losses, params, opt)
        if batch_losses:
            total_loss += _flush_batch(batch_losses, params, opt)
        train_loss = total_loss / len(examples)

        val_auc = None
        if val_pairs:
            val_rng = np.random.default_rng(np.random.SeedSequence(entropy=12021, spawn_key=(epoch,)))
            val_auc = validation_auc(params, cfg, val_pairs, pool, val_rng, prefix=prefix)
        history.append({"epoch": epoch, "train_loss": train_loss, "val_auc": val_auc, "seconds": time.time() - t0})
        if log:
            log(f"esim epoch {epoch}: loss {train_loss:.4f}" + (f" val_auc {val_auc:.4f}" if val_auc is not None else ""))

        if val_auc is not None:
            if val_auc > best_auc:
                best_auc = val_auc
                best = params.copy()
                since_best = 0
            else:
                since_best += 1
                if since_best >= patience:
                    break
        else:
            best = params.copy()
    return best, history


def _flush_batch(batch_losses: list[Tensor], params: ParameterStore, opt: OptimizerState) -> float:
    total = mean(concat([reshape(l, (1,)) for l in batch_losses], axis=0))
    total.backward()
    adam_step(params, opt)
    value = total.item() * len(batch_losses)
    batch_losses.clear()
    return value
