"""Evaluation suite: corpus BLEU, exact-match METEOR, Distinct-n, a
reference-free retrieval-score metric, and the combined report.

Pinned conventions (echoed in the report's config block so numbers are not
mistaken for other implementations):
  * BLEU: modified n-gram precisions up to 4, uniform geometric mean,
    brevity penalty exp(1 - ref_len/hyp_len) when the hypothesis side is
    shorter; for n >= 2 a zero match count is smoothed add-one
    ((matched + 1) / (total + 1)).
  * METEOR ("meteor-em"): exact surface matches only — no stemming or
    synonyms — with the alignment chosen to maximize matches and then
    minimize chunks.
  * Metric tokenization is the corpus tokenizer's lowercased surface split.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, asdict

from .corpus import EOS, Tokenizer, TrainingPair
from .s2s import S2SConfig, greedy_decode

METRICS_CONFIG = {
    "bleu_max_n": 4,
    "bleu_smoothing": "add-one on zero-count precisions for n >= 2",
    "meteor": "meteor-em (exact-match alignment, no stems or synonyms)",
    "tokenization": "lowercased surface split of the corpus tokenizer",
}

# Diversity of the DailyDialog ground-truth responses at full dataset scale,
# kept as reference points; reproducing them requires the real corpus.
DAILYDIALOG_GROUND_TRUTH = {"dist_1": 0.0681, "dist_2": 0.4061}


@dataclass
class MetricsReport:
    avg_len: float
    bleu: float
    meteor: float
    dist_1: float
    dist_2: float
    maude_esim: float | None
    n_examples: int

    def to_json(self) -> str:
        payload = asdict(self)
        payload["config"] = dict(METRICS_CONFIG)
        return json.dumps(payload, indent=2)


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(hyps: list[list[str]], refs: list[list[str]], max_n: int = 4) -> float:
    """Corpus BLEU over tokenized hypothesis/reference pairs."""
    if not hyps or len(hyps) != len(refs):
        raise ValueError("bleu needs equally many non-empty hypothesis and reference lists")
    matched = [0] * max_n
    total = [0] * max_n
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hyps, refs):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            hyp_counts = _ngrams(hyp, n)
            ref_counts = _ngrams(ref, n)
            total[n - 1] += sum(hyp_counts.values())
            matched[n - 1] += sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())
    if hyp_len == 0:
        return 0.0
    precisions = []
    for n in range(1, max_n + 1):
        m, t = matched[n - 1], total[n - 1]
        if n >= 2 and m == 0:
            m, t = m + 1, t + 1
        if t == 0 or m == 0:
            return 0.0
        precisions.append(m / t)
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.exp(sum(math.log(p) for p in precisions) / max_n)


# ---------------------------------------------------------------------------
# METEOR (exact-match variant)
# ---------------------------------------------------------------------------

_SEARCH_BUDGET = 200_000


def _align(hyp: list[str], ref: list[str]) -> tuple[int, int]:
    """(matches, chunks) of the alignment maximizing matches then minimizing
    chunks. Exact branch-and-bound with memoization; falls back to a greedy
    chunk-preferring alignment on adversarial inputs (minimum-chunk alignment
    is NP-hard in general)."""
    max_matches = sum((Counter(hyp) & Counter(ref)).values())
    if max_matches == 0:
        return 0, 0
    if len(ref) > 60:
        return _align_greedy(hyp, ref, max_matches)

    candidates = [[j for j, w in enumerate(ref) if w == h] for h in hyp]
    memo: dict[tuple[int, int, int], tuple[int, int]] = {}
    visited = 0

    def search(i: int, mask: int, last: int) -> tuple[int, int]:
        """Best (matches, -chunks) achievable from hyp position i."""
        nonlocal visited
        if i == len(hyp):
            return (0, 0)
        key = (i, mask, last)
        if key in memo:
            return memo[key]
        visited += 1
        if visited > _SEARCH_BUDGET:
            raise _BudgetExceeded
        best = search(i + 1, mask, -1)  # leave position i unmatched
        for j in candidates[i]:
            if mask & (1 << j):
                continue
            new_chunk = 0 if j == last + 1 and last >= 0 else 1
            m, negc = search(i + 1, mask | (1 << j), j)
            cand = (m + 1, negc - new_chunk)
            if cand > best:
                best = cand
        memo[key] = best
        return best

    try:
        matches, neg_chunks = search(0, 0, -1)
        return matches, -neg_chunks
    except _BudgetExceeded:
        return _align_greedy(hyp, ref, max_matches)


class _BudgetExceeded(Exception):
    pass


def _align_greedy(hyp: list[str], ref: list[str], max_matches: int) -> tuple[int, int]:
    used = [False] * len(ref)
    last = -2
    matches = 0
    chunks = 0
    for i, w in enumerate(hyp):
        pick = -1
        if last + 1 < len(ref) and not used[last + 1] and ref[last + 1] == w:
            pick = last + 1  # continue the current chunk when possible
        else:
            for j, rw in enumerate(ref):
                if not used[j] and rw == w:
                    pick = j
                    break
        if pick < 0:
            last = -2
            continue
        used[pick] = True
        matches += 1
        chunks += 0 if pick == last + 1 else 1
        last = pick
    return matches, chunks


def meteor(hyp: list[str], ref: list[str]) -> float:
    """Harmonic-mean score with the fragmentation penalty
    0.5 * (chunks / matches)^3; zero when nothing matches."""
    if not hyp or not ref:
        raise ValueError("meteor needs non-empty token lists")
    matches, chunks = _align(hyp, ref)
    if matches == 0:
        return 0.0
    precision = matches / len(hyp)
    recall = matches / len(ref)
    f_mean = 10.0 * precision * recall / (recall + 9.0 * precision)
    penalty = 0.5 * (chunks / matches) ** 3
    return f_mean * (1.0 - penalty)


def meteor_chunks(hyp: list[str], ref: list[str]) -> tuple[int, int]:
    """Expose (matches, chunks) of the chosen alignment."""
    return _align(hyp, ref)


def distinct_n(hyps: list[list[str]], n: int) -> float:
    """Unique n-grams over total n-grams across all hypotheses."""
    if not hyps:
        raise ValueError("distinct_n needs at least one hypothesis")
    seen: set[tuple[str, ...]] = set()
    total = 0
    for hyp in hyps:
        for i in range(len(hyp) - n + 1):
            seen.add(tuple(hyp[i : i + n]))
            total += 1
    return len(seen) / total if total else 0.0


def maude_like(context_ids_list, hyp_ids_list, scorer) -> float:
    """Mean retrieval score of (context, hypothesis) — no reference needed."""
    if len(context_ids_list) != len(hyp_ids_list) or not context_ids_list:
        raise ValueError("need one hypothesis per context")
    total = 0.0
    for ctx, hyp in zip(context_ids_list, hyp_ids_list):
        total += scorer.score(ctx, list(hyp) or [EOS])
    return total / len(context_ids_list)


def compute_report(
    hyp_tokens: list[list[str]],
    ref_tokens: list[list[str]],
    context_ids_list=None,
    hyp_ids_list=None,
    scorer=None,
) -> MetricsReport:
    maude = None
    if scorer is not None and context_ids_list is not None and hyp_ids_list is not None:
        maude = maude_like(context_ids_list, hyp_ids_list, scorer)
    meteor_vals = [meteor(h, r) if h and r else 0.0 for h, r in zip(hyp_tokens, ref_tokens)]
    return MetricsReport(
        avg_len=sum(len(h) for h in hyp_tokens) / len(hyp_tokens),
        bleu=bleu(hyp_tokens, ref_tokens),
        meteor=sum(meteor_vals) / len(meteor_vals),
        dist_1=distinct_n(hyp_tokens, 1),
        dist_2=distinct_n(hyp_tokens, 2),
        maude_esim=maude,
        n_examples=len(hyp_tokens),
    )


def evaluate(
    s2s_params,
    s2s_cfg: S2SConfig,
    pairs: list[TrainingPair],
    tokenizer: Tokenizer,
    scorer=None,
) -> MetricsReport:
    """Greedy-decode every test context and score the hypotheses."""
    hyp_tokens: list[list[str]] = []
    ref_tokens: list[list[str]] = []
    contexts = []
    hyp_ids = []
    for pair in pairs:
        decoded = greedy_decode(pair.context.flat, s2s_params, s2s_cfg)
        ids = [t for t in decoded.token_ids if t != EOS]
        hyp_ids.append(ids)
        contexts.append(pair.context.flat)
        hyp_tokens.append(tokenizer.decode(ids).split())
        ref_tokens.append(tokenizer.decode(pair.response.token_ids).split())
    return compute_report(hyp_tokens, ref_tokens, contexts, hyp_ids, scorer)
