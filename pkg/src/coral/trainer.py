"""End-to-end seq2seq training loop.

Per batch: select a candidate per item (mix-policy), query the frozen
scorer for rewards, compute the configured loss, backprop, Adam step.
Per epoch: validate by greedy-decoding the validation contexts and
averaging their rewards; early-stop on that metric.

Determinism contract: the epoch-e rng is derived from (seed, e) alone, so
a run resumed from a checkpoint (which carries optimizer state) replays
the exact trajectory of an uninterrupted run.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backend import (
    OptimizerState,
    ParameterStore,
    adam_step,
    concat,
    load_arrays,
    mean,
    reshape,
    save_arrays,
)
from .corpus import EOS, TrainingPair, UtterancePool
from .losses import (
    GROUND_TRUTH,
    CandidateResponse,
    CoralConfig,
    ce_loss,
    coral_loss,
    mixed_coral_loss,
    select_candidate,
)
from .retrieval import retrieval_reward
from .s2s import S2SConfig, greedy_decode, init_s2s_params, sequence_logprobs

LOSS_KINDS = ("ce", "coral")


@dataclass
class TrainConfig:
    loss: str = "coral"
    batch_size: int = 16
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    peak_lr: float = 1e-4
    warmup_steps: int = 1000
    clip_norm: float = 1.0
    coral: CoralConfig = field(default_factory=CoralConfig)

    def __post_init__(self):
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        if self.max_epochs < 1 or self.patience < 1:
            raise ValueError("max_epochs and patience must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_r3: float
    lr: float
    seconds: float


@dataclass
class RunLog:
    records: list[EpochRecord] = field(default_factory=list)

    @property
    def best_epoch(self) -> int:
        values = [r.val_r3 for r in self.records]
        return int(np.argmax(values)) + 1 if values else 0

    def matches(self, other: "RunLog") -> bool:
        """Equality of everything deterministic (wall time excluded)."""
        if len(self.records) != len(other.records):
            return False
        return all(
            a.epoch == b.epoch and a.train_loss == b.train_loss and a.val_r3 == b.val_r3 and a.lr == b.lr
            for a, b in zip(self.records, other.records)
        )

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_r3", "lr", "seconds"])
            for r in self.records:
                writer.writerow([r.epoch, repr(r.train_loss), repr(r.val_r3), repr(r.lr), repr(r.seconds)])

    @classmethod
    def from_csv(cls, path) -> "RunLog":
        log = cls()
        with Path(path).open(newline="") as fh:
            for row in csv.DictReader(fh):
                log.records.append(
                    EpochRecord(
                        epoch=int(row["epoch"]),
                        train_loss=float(row["train_loss"]),
                        val_r3=float(row["val_r3"]),
                        lr=float(row["lr"]),
                        seconds=float(row["seconds"]),
                    )
                )
        return log


@dataclass
class TrainingData:
    train_pairs: list[TrainingPair]
    val_pairs: list[TrainingPair]
    pool: UtterancePool | None = None


# ---------------------------------------------------------------------------
# Checkpoints (parameters + optimizer moments + scalar metadata)
# ---------------------------------------------------------------------------


def save_checkpoint(path, params: ParameterStore, optimizer: OptimizerState | None = None, meta: dict | None = None) -> None:
    arrays: dict[str, np.ndarray] = {name: p.data for name, p in params.items()}
    if optimizer is not None:
        for name in params.names():
            arrays[f"optim.m.{name}"] = optimizer.m[name]
            arrays[f"optim.v.{name}"] = optimizer.v[name]
        arrays["meta.optim_step"] = np.array([optimizer.step], dtype=np.float32)
    for key, value in (meta or {}).items():
        arrays[f"meta.{key}"] = np.array([value], dtype=np.float32)
    save_arrays(path, arrays)


def load_checkpoint(path):
    """Returns (param_arrays, moment_arrays, meta). Parameter entries keep
    their model namespace (s2s.* / esim.*)."""
    arrays = load_arrays(path)
    param_arrays: dict[str, np.ndarray] = {}
    moments: dict[str, np.ndarray] = {}
    meta: dict[str, float] = {}
    for name, arr in arrays.items():
        if name.startswith("optim."):
            moments[name[len("optim.") :]] = arr
        elif name.startswith("meta."):
            meta[name[len("meta.") :]] = float(arr[0])
        else:
            param_arrays[name] = arr
    return param_arrays, moments, meta


S2S_META_FIELDS = ("vocab_size", "n_layers", "n_heads", "d_model", "max_context_len", "max_response_len")


def s2s_meta(cfg: S2SConfig) -> dict:
    return {name: getattr(cfg, name) for name in S2S_META_FIELDS}


def s2s_config_from_meta(meta: dict) -> S2SConfig:
    return S2SConfig(**{name: int(meta[name]) for name in S2S_META_FIELDS})


def load_s2s(path) -> tuple[ParameterStore, S2SConfig, dict]:
    param_arrays, _, meta = load_checkpoint(path)
    cfg = s2s_config_from_meta(meta)
    params = init_s2s_params(cfg, np.random.default_rng(0))
    params.load_values(param_arrays)
    return params, cfg, meta


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def validate_r3(
    s2s_params: ParameterStore,
    s2s_cfg: S2SConfig,
    scorer,
    val_pairs: list[TrainingPair],
    margin: float,
) -> float:
    """Mean reward of greedy decodes over the validation contexts."""
    total = 0.0
    for pair in val_pairs:
        decoded = greedy_decode(pair.context.flat, s2s_params, s2s_cfg)
        tokens = [t for t in decoded.token_ids if t != EOS] or [EOS]
        total += retrieval_reward(scorer, pair.context.flat, tokens, margin)
    return total / len(val_pairs)


def validate_ce(s2s_params: ParameterStore, s2s_cfg: S2SConfig, val_pairs: list[TrainingPair]) -> float:
    """Mean total cross-entropy of the ground-truth responses."""
    frozen = s2s_params.detached()
    total = 0.0
    for pair in val_pairs:
        target = _fit_tokens(pair.response.token_ids, s2s_cfg) + [EOS]
        lp = sequence_logprobs(pair.context.flat, target, frozen, s2s_cfg)
        total += -float(lp.data.sum())
    return total / len(val_pairs)


def _fit_tokens(tokens, s2s_cfg: S2SConfig) -> list[int]:
    return list(tokens)[: s2s_cfg.max_response_len - 1]


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(epoch,)))


def _batches(n_items: int, batch_size: int, lengths: list[int], rng: np.random.Generator):
    """Seeded shuffle, then bucket nearby items by response length."""
    order = list(rng.permutation(n_items))
    bucket_span = batch_size * 8
    bucketed: list[int] = []
    for start in range(0, n_items, bucket_span):
        chunk = order[start : start + bucket_span]
        chunk.sort(key=lambda i: (lengths[i], i))
        bucketed.extend(chunk)
    return [bucketed[i : i + batch_size] for i in range(0, n_items, batch_size)]


def train(
    data: TrainingData,
    s2s_cfg: S2SConfig,
    cfg: TrainConfig,
    scorer=None,
    out_dir=None,
    resume_from=None,
    stop_after_epoch: int | None = None,
    log=None,
) -> tuple[ParameterStore, RunLog]:
    """Train a policy with CE or the coral loss; returns the best-validation
    parameters and the run log.

    With a scorer present, validation and early stopping use the mean reward
    of greedy decodes; a CE run without a scorer falls back to negative
    validation cross-entropy as its early-stopping metric.

    stop_after_epoch halts the loop right after that epoch's checkpoint, as
    an interruption would; a later resume_from run with the same config
    replays the uninterrupted trajectory exactly (the checkpoint carries the
    optimizer moments and the schedule horizon).
    """
    if cfg.loss == "coral" and scorer is None:
        raise ValueError("coral loss requires a trained retrieval scorer")
    if not data.train_pairs or not data.val_pairs:
        raise ValueError("need non-empty train and validation pairs")

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    batches_per_epoch = math.ceil(len(data.train_pairs) / cfg.batch_size)
    total_steps = cfg.max_epochs * batches_per_epoch

    params = init_s2s_params(s2s_cfg, _epoch_rng(cfg.seed, 0))
    opt = OptimizerState(
        params,
        peak_lr=cfg.peak_lr,
        warmup_steps=cfg.warmup_steps,
        total_steps=total_steps,
        clip_norm=cfg.clip_norm,
    )
    runlog = RunLog()
    start_epoch = 1
    best_val = -np.inf
    best_epoch = 0
    best_params = params.copy()

    if resume_from is not None:
        param_arrays, moments, meta = load_checkpoint(resume_from)
        params.load_values(param_arrays)
        for name in params.names():
            opt.m[name] = moments[f"m.{name}"].astype(np.float32)
            opt.v[name] = moments[f"v.{name}"].astype(np.float32)
        opt.step = int(meta["optim_step"])
        if "total_steps" in meta:
            # the decay horizon is part of the optimizer state
            opt.total_steps = int(meta["total_steps"])
        start_epoch = int(meta["epoch"]) + 1
        best_val = float(np.float32(meta["best_val"]))
        best_epoch = int(meta["best_epoch"])
        runlog_path = Path(resume_from).parent / "runlog.csv"
        if runlog_path.exists():
            runlog = RunLog.from_csv(runlog_path)
            runlog.records = runlog.records[: start_epoch - 1]
        best_ckpt = Path(resume_from).parent / "s2s_best.crl"
        if best_ckpt.exists():
            best_arrays, _, _ = load_checkpoint(best_ckpt)
            best_params.load_values(best_arrays)

    since_best = max(0, (start_epoch - 1) - best_epoch) if best_epoch else 0

    for epoch in range(start_epoch, cfg.max_epochs + 1):
        t0 = time.time()
        rng = _epoch_rng(cfg.seed, epoch)
        lengths = [len(p.response) for p in data.train_pairs]
        lr = 0.0
        total_loss = 0.0
        n_items = 0
        for batch in _batches(len(data.train_pairs), cfg.batch_size, lengths, rng):
            losses = []
            for idx in batch:
                pair = data.train_pairs[idx]
                losses.append(_item_loss(pair, params, s2s_cfg, cfg, scorer, data.pool, rng))
            batch_loss = mean(concat([reshape(l, (1,)) for l in losses], axis=0))
            batch_loss.backward()
            lr = adam_step(params, opt)
            total_loss += batch_loss.item() * len(batch)
            n_items += len(batch)
        train_loss = total_loss / n_items

        if scorer is not None:
            val_metric = validate_r3(params, s2s_cfg, scorer, data.val_pairs, cfg.coral.margin)
        else:
            val_metric = -validate_ce(params, s2s_cfg, data.val_pairs)
        runlog.records.append(
            EpochRecord(epoch=epoch, train_loss=train_loss, val_r3=val_metric, lr=lr, seconds=time.time() - t0)
        )
        if log:
            log(f"epoch {epoch}: train_loss {train_loss:.4f} val {val_metric:.4f} lr {lr:.2e}")

        # float32 comparison so a resumed run (which reloads best_val from a
        # float32 checkpoint) makes identical decisions
        if np.float32(val_metric) > np.float32(best_val):
            best_val = val_metric
            best_epoch = epoch
            best_params = params.copy()
            since_best = 0
        else:
            since_best += 1

        if out_dir is not None:
            meta = {"epoch": epoch, "best_val": best_val, "best_epoch": best_epoch, "total_steps": opt.total_steps}
            save_checkpoint(out_dir / "s2s_last.crl", params, optimizer=opt, meta={**meta, **s2s_meta(s2s_cfg)})
            save_checkpoint(out_dir / "s2s_best.crl", best_params, meta={**meta, **s2s_meta(s2s_cfg)})
            runlog.to_csv(out_dir / "runlog.csv")

        if since_best >= cfg.patience:
            break
        if stop_after_epoch is not None and epoch >= stop_after_epoch:
            break

    return best_params, runlog


def _item_loss(pair, params, s2s_cfg, cfg: TrainConfig, scorer, pool, rng):
    gt_tokens = _fit_tokens(pair.response.token_ids, s2s_cfg)
    if cfg.loss == "ce":
        return ce_loss(sequence_logprobs(pair.context.flat, gt_tokens + [EOS], params, s2s_cfg))

    candidate = select_candidate(pair, cfg.coral, pool, params, s2s_cfg, rng)
    candidate = CandidateResponse(tokens=_fit_tokens(candidate.tokens, s2s_cfg), source=candidate.source)
    cand_reward = _reward_for(scorer, pair, candidate.tokens, cfg.coral.margin)
    cand_lp = sequence_logprobs(pair.context.flat, candidate.tokens + [EOS], params, s2s_cfg)

    if not cfg.coral.both_terms:
        return coral_loss(cand_lp, cand_reward)

    if candidate.source == GROUND_TRUTH:
        return mixed_coral_loss((cand_lp, cand_reward))
    gt_reward = _reward_for(scorer, pair, gt_tokens, cfg.coral.margin)
    gt_lp = sequence_logprobs(pair.context.flat, gt_tokens + [EOS], params, s2s_cfg)
    return mixed_coral_loss((gt_lp, gt_reward), (cand_lp, cand_reward))


def _reward_for(scorer, pair, tokens: list[int], margin: float) -> float:
    # An empty candidate (nucleus sampled EOS immediately) is scored as the
    # bare terminator.
    scoring_tokens = tokens if tokens else [EOS]
    return retrieval_reward(scorer, pair.context.flat, scoring_tokens, margin)
