"""Candidate selection and the training objectives.

The coral loss is plain episodic REINFORCE against the retrieval reward:
minimize -reward * sum_t log P(r_t | r_<t, c), with the reward a detached
scalar. The mixed form adds the candidate term to the ground-truth term;
cross-entropy is the reward-free special case (and with p_plus = 1 and
margin 0 the coral loss equals score * CE exactly, sample by sample).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backend import ParameterStore, Tensor, mul, sum_
from .corpus import EOS, TrainingPair, UtterancePool, sample_negative
from .s2s import S2SConfig, nucleus_decode

GROUND_TRUTH = "ground-truth"
NUCLEUS = "nucleus"
RANDOM_NEGATIVE = "random-negative"
CANDIDATE_MODES = (NUCLEUS, RANDOM_NEGATIVE)


@dataclass
class CoralConfig:
    p_plus: float = 0.8
    margin: float = 0.4
    candidate_mode: str = NUCLEUS
    top_p: float = 0.9
    # Algorithm form: either/or per draw (default) or always the ground-truth
    # term plus at most one sampled candidate term.
    both_terms: bool = False

    def __post_init__(self):
        if not 0.0 <= self.p_plus <= 1.0:
            raise ValueError(f"p_plus must be in [0, 1], got {self.p_plus}")
        if not 0.0 <= self.margin <= 1.0:
            raise ValueError(f"margin must be in [0, 1], got {self.margin}")
        if self.candidate_mode not in CANDIDATE_MODES:
            raise ValueError(f"candidate_mode must be one of {CANDIDATE_MODES}, got {self.candidate_mode!r}")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError(f"top_p must be in (0, 1], got {self.top_p}")


@dataclass
class CandidateResponse:
    """A response candidate; tokens exclude the terminator, `length` counts it."""

    tokens: list[int]
    source: str

    @property
    def length(self) -> int:
        return len(self.tokens) + 1


def select_candidate(
    pair: TrainingPair,
    cfg: CoralConfig,
    pool: UtterancePool | None,
    s2s_params: ParameterStore,
    s2s_cfg: S2SConfig,
    rng: np.random.Generator,
) -> CandidateResponse:
    """Ground truth with probability p_plus, otherwise an on-policy nucleus
    sample or a uniform pool draw depending on the candidate mode."""
    if rng.random() > cfg.p_plus:
        if cfg.candidate_mode == NUCLEUS:
            decoded = nucleus_decode(pair.context.flat, s2s_params, s2s_cfg, top_p=cfg.top_p, rng=rng)
            tokens = [t for t in decoded.token_ids if t != EOS]
            return CandidateResponse(tokens=tokens, source=NUCLEUS)
        if pool is None:
            raise ValueError("random-negative mode needs an utterance pool")
        return CandidateResponse(tokens=list(sample_negative(pool, rng).token_ids), source=RANDOM_NEGATIVE)
    return CandidateResponse(tokens=list(pair.response.token_ids), source=GROUND_TRUTH)


def coral_loss(logprobs: Tensor, reward: float) -> Tensor:
    """-reward * sum(logprobs). The reward enters as a constant, so no
    gradient can reach whatever produced it."""
    return mul(sum_(logprobs), -float(reward))


def mixed_coral_loss(pos: tuple[Tensor, float], neg: tuple[Tensor, float] | None = None) -> Tensor:
    """Ground-truth term plus an optional sampled-candidate term."""
    loss = coral_loss(*pos)
    if neg is not None:
        loss = loss + coral_loss(*neg)
    return loss


def ce_loss(logprobs: Tensor) -> Tensor:
    """Negative total log-likelihood of the ground-truth response (sum form)."""
    return mul(sum_(logprobs), -1.0)
