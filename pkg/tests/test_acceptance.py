"""Acceptance gate: every criterion asserted at its stated tolerance, one
printed pass/fail line each (run with `pytest -s tests/test_acceptance.py -v`
to watch them stream).

The heavy fixtures (synthetic corpus, trained scorer, end-to-end training
runs) are shared across criteria; their wall-clock budgets are asserted too.
"""

import math
import time
from collections import Counter
from dataclasses import dataclass

import numpy as np
import pytest

from coral.backend import ParameterStore, exp, max_relative_error, mul, sum_
from coral.cli import main as cli_main
from coral.corpus import (
    EOS,
    build_pool,
    build_tokenizer,
    default_grammar,
    generate_synthetic,
    make_pairs,
    sample_negative,
    save_corpus,
)
from coral.losses import CoralConfig, ce_loss, coral_loss, mixed_coral_loss
from coral.metrics import bleu, distinct_n, meteor
from coral.retrieval import EsimConfig, EsimScorer, roc_auc, save_scorer, train_retrieval
from coral.s2s import S2SConfig, greedy_decode, init_s2s_params, nucleus_sample, sequence_logprobs
from coral.trainer import (
    TrainConfig,
    TrainingData,
    load_checkpoint,
    save_checkpoint,
    train,
    validate_r3,
)

pytestmark = pytest.mark.slow


def _report(number: int, ok: bool, detail: str) -> None:
    print(f"[criterion {number:2d}] {'PASS' if ok else 'FAIL'}: {detail}", flush=True)
    assert ok, f"criterion {number}: {detail}"


# ---------------------------------------------------------------------------
# Shared synthetic world
# ---------------------------------------------------------------------------


@dataclass
class World:
    grammar: object
    oracle: object
    tokenizer: object
    train_pairs: list
    val_pairs: list
    test_pairs: list
    pool: object


@pytest.fixture(scope="module")
def world():
    rng = np.random.default_rng(0)
    grammar = default_grammar()
    dialogs, oracle = generate_synthetic(grammar, 5600, rng)
    tokenizer = build_tokenizer(dialogs, 300)
    train_pairs = make_pairs(dialogs[:5000], tokenizer)
    val_pairs = make_pairs(dialogs[5000:5300], tokenizer)
    test_pairs = make_pairs(dialogs[5300:], tokenizer)
    assert len(train_pairs) >= 5000
    return World(grammar, oracle, tokenizer, train_pairs, val_pairs, test_pairs, build_pool(train_pairs))


def _heldout_auc(world: World, scorer, negatives: int = 9) -> float:
    """AUC of the scorer against exact oracle labels on held-out contexts."""
    rng = np.random.default_rng(7)
    labels, scores = [], []
    for pair in world.test_pairs:
        ctx_text = world.tokenizer.decode(pair.context.flat)
        candidates = [pair.response] + [sample_negative(world.pool, rng) for _ in range(negatives)]
        for cand in candidates:
            labels.append(world.oracle(ctx_text, world.tokenizer.decode(cand.token_ids)))
            scores.append(scorer.score(pair.context.flat, cand.token_ids))
    return roc_auc(labels, scores)


@dataclass
class ScorerBundle:
    scorer: EsimScorer
    params: ParameterStore
    cfg: EsimConfig
    heldout_auc: float
    control_auc: float
    seconds: float


@pytest.fixture(scope="module")
def scorer_bundle(world):
    cfg = EsimConfig(vocab_size=world.tokenizer.vocab_size, embed_dim=32, hidden_dim=32, mlp_hidden=(64, 32))
    t0 = time.time()
    params, _ = train_retrieval(
        world.train_pairs,
        world.pool,
        cfg,
        epochs=2,
        rng=np.random.default_rng(1),
        val_pairs=world.val_pairs[:100],
        lr=2e-3,
        negatives_per_positive=1,
    )
    scorer = EsimScorer(params, cfg)
    auc = _heldout_auc(world, scorer)
    seconds = time.time() - t0

    control_params, _ = train_retrieval(
        world.train_pairs,
        world.pool,
        cfg,
        epochs=1,
        rng=np.random.default_rng(2),
        lr=2e-3,
        negatives_per_positive=1,
        shuffle_labels=True,
    )
    control_auc = _heldout_auc(world, EsimScorer(control_params, cfg))
    return ScorerBundle(scorer, params, cfg, auc, control_auc, seconds)


def _desk_s2s_cfg(vocab_size: int) -> S2SConfig:
    return S2SConfig(vocab_size=vocab_size, n_layers=2, n_heads=4, d_model=64, max_context_len=32, max_response_len=12)


def _validity_and_dists(world: World, params, s2s_cfg):
    ok = 0
    hyps = []
    for pair in world.test_pairs:
        decoded = greedy_decode(pair.context.flat, params, s2s_cfg)
        ids = [t for t in decoded.token_ids if t != EOS]
        text = world.tokenizer.decode(ids)
        hyps.append(text.split())
        ok += world.oracle(world.tokenizer.decode(pair.context.flat), text)
    return ok / len(world.test_pairs), distinct_n(hyps, 1), distinct_n(hyps, 2)


@dataclass
class EndToEnd:
    coral_validity: float
    coral_dists: tuple
    coral_reward: float
    coral_seconds: float
    ce_validity: float
    ce_dists: tuple
    ce_reward: float


@pytest.fixture(scope="module")
def end_to_end(world, scorer_bundle):
    s2s_cfg = _desk_s2s_cfg(world.tokenizer.vocab_size)
    data = TrainingData(world.train_pairs[:2000], world.val_pairs, world.pool)

    def run(loss):
        cfg = TrainConfig(
            loss=loss,
            batch_size=16,
            max_epochs=8,
            patience=8,
            seed=5,
            peak_lr=3e-4,
            warmup_steps=100,
            coral=CoralConfig(p_plus=0.8, margin=0.0, candidate_mode="nucleus", top_p=0.9),
        )
        best, _ = train(data, s2s_cfg, cfg, scorer=scorer_bundle.scorer)
        return best

    t0 = time.time()
    coral_params = run("coral")
    coral_validity, d1, d2 = _validity_and_dists(world, coral_params, s2s_cfg)
    coral_reward = validate_r3(coral_params, s2s_cfg, scorer_bundle.scorer, world.test_pairs, 0.0)
    coral_seconds = time.time() - t0

    ce_params = run("ce")
    ce_validity, ce_d1, ce_d2 = _validity_and_dists(world, ce_params, s2s_cfg)
    ce_reward = validate_r3(ce_params, s2s_cfg, scorer_bundle.scorer, world.test_pairs, 0.0)
    return EndToEnd(coral_validity, (d1, d2), coral_reward, coral_seconds, ce_validity, (ce_d1, ce_d2), ce_reward)


# ---------------------------------------------------------------------------
# Criteria
# ---------------------------------------------------------------------------


def test_criterion_1_gradient_correctness():
    t0 = time.time()
    cfg = S2SConfig(vocab_size=20, n_layers=2, n_heads=4, d_model=16, max_context_len=12, max_response_len=8)
    params = init_s2s_params(cfg, np.random.default_rng(10))
    context = [5, 9, 3, 14, 7]
    gt = [6, 11, 12]
    neg = [17, 8]

    def build_loss(p):
        lp_pos = sequence_logprobs(context, gt + [EOS], p, cfg)
        lp_neg = sequence_logprobs(context, neg + [EOS], p, cfg)
        return mixed_coral_loss((lp_pos, 0.37), (lp_neg, -0.21))

    from coral.backend import finite_difference_check

    err = finite_difference_check(build_loss, params, n_coords=200, h=1e-3, rng=np.random.default_rng(11))
    elapsed = time.time() - t0
    _report(1, err < 1e-3 and elapsed < 60, f"coral-loss gradcheck max rel err {err:.2e} (<1e-3), {elapsed:.1f}s")


def test_criterion_2_reinforce_identity():
    t0 = time.time()
    vocab = 5
    cfg = S2SConfig(vocab_size=vocab, n_layers=1, n_heads=2, d_model=8, max_context_len=4, max_response_len=2)
    params = init_s2s_params(cfg, np.random.default_rng(12)).astype(np.float64)
    context = [4, 3]

    sequences = [[EOS]] + [[a, b] for a in range(vocab) if a != EOS for b in range(vocab)]
    reward_rng = np.random.default_rng(13)
    rewards = {tuple(seq): float(reward_rng.uniform(-0.5, 0.5)) for seq in sequences}

    total_prob = 0.0
    estimator_terms = []
    expectation_terms = []
    for seq in sequences:
        lp = sequence_logprobs(context, seq, params, cfg)
        log_p = sum_(lp)
        prob = math.exp(float(log_p.data))
        total_prob += prob
        reward = rewards[tuple(seq)]
        estimator_terms.append(mul(log_p, prob * reward))  # P and R detached
        expectation_terms.append(mul(exp(log_p), reward))  # differentiable P

    assert abs(total_prob - 1.0) < 1e-9

    params.zero_grads()
    total = estimator_terms[0]
    for term in estimator_terms[1:]:
        total = total + term
    total.backward()
    estimator_grads = {name: p.grad.copy() for name, p in params.items() if p.grad is not None}

    params.zero_grads()
    total = expectation_terms[0]
    for term in expectation_terms[1:]:
        total = total + term
    total.backward()

    worst = 0.0
    for name, p in params.items():
        got = estimator_grads.get(name, np.zeros_like(p.data))
        want = p.grad if p.grad is not None else np.zeros_like(p.data)
        worst = max(worst, max_relative_error(got, want))
    elapsed = time.time() - t0
    _report(2, worst < 1e-3 and elapsed < 60, f"policy-gradient estimator vs direct grad of E[R]: max rel err {worst:.2e}, {elapsed:.1f}s")


def test_criterion_3_ce_equivalence():
    rng = np.random.default_rng(14)
    exact = 0
    for _ in range(100):
        values = -rng.exponential(1.0, size=rng.integers(1, 10)).astype(np.float32)
        score = float(rng.uniform(0.01, 0.99))
        from coral.backend import Tensor

        lp1 = Tensor(values, requires_grad=True)
        lp2 = Tensor(values.copy(), requires_grad=True)
        coral_value = coral_loss(lp1, score - 0.0).item()  # p_plus=1 path, margin 0
        weighted_ce = mul(ce_loss(lp2), score).item()
        exact += coral_value == weighted_ce
    _report(3, exact == 100, f"L_coral == score * L_ce bit-exactly on {exact}/100 samples")


def test_criterion_4_sign_property():
    cfg = S2SConfig(vocab_size=20, n_layers=1, n_heads=2, d_model=16, max_context_len=8, max_response_len=6)
    rng = np.random.default_rng(15)
    passes = 0
    trials = 0
    for trial in range(10):
        params = init_s2s_params(cfg, np.random.default_rng(100 + trial)).astype(np.float64)
        context = list(rng.integers(5, 20, size=4))
        target = list(rng.integers(5, 20, size=3)) + [EOS]
        for reward, should_increase in ((-0.1, False), (0.1, True)):
            trials += 1
            fresh = params.copy()
            before = float(sequence_logprobs(context, target, fresh, cfg).data.sum())
            loss = coral_loss(sequence_logprobs(context, target, fresh, cfg), reward)
            fresh.zero_grads()
            loss.backward()
            for _, p in fresh.items():
                if p.grad is not None:
                    p.data = p.data - 1e-3 * p.grad
            after = float(sequence_logprobs(context, target, fresh, cfg).data.sum())
            if (after > before) == should_increase and after != before:
                passes += 1
    _report(4, passes == trials, f"one plain-gradient step moved total log-prob in the reward's direction in {passes}/{trials} trials")


def test_criterion_5_nucleus_sampler():
    rng = np.random.default_rng(16)
    probs = np.array([0.5, 0.3, 0.15, 0.05])
    counts = np.zeros(4)
    n = 100_000
    for _ in range(n):
        counts[nucleus_sample(probs, 0.8, rng)] += 1
    tv = 0.5 * np.abs(counts / n - np.array([0.625, 0.375, 0.0, 0.0])).sum()
    _report(5, tv < 0.02, f"top-p empirical frequencies within TV {tv:.4f} (<0.02) of the renormalized nucleus")


def test_criterion_6_retrieval_scorer(world, scorer_bundle):
    ok = (
        scorer_bundle.heldout_auc >= 0.95
        and 0.45 <= scorer_bundle.control_auc <= 0.55
        and scorer_bundle.seconds < 600
    )
    _report(
        6,
        ok,
        f"held-out AUC vs oracle {scorer_bundle.heldout_auc:.4f} (>=0.95), "
        f"shuffled-label control {scorer_bundle.control_auc:.4f} (in [0.45, 0.55]), "
        f"{scorer_bundle.seconds:.0f}s (<600s)",
    )


def test_criterion_7_end_to_end(end_to_end):
    ok = end_to_end.coral_validity >= 0.8 and end_to_end.coral_seconds < 1800
    comparison = ">=" if end_to_end.coral_reward >= end_to_end.ce_reward else "<"
    print(
        f"    coral: validity {end_to_end.coral_validity:.3f} dist1 {end_to_end.coral_dists[0]:.3f} "
        f"dist2 {end_to_end.coral_dists[1]:.3f} mean reward {end_to_end.coral_reward:.3f}\n"
        f"    ce   : validity {end_to_end.ce_validity:.3f} dist1 {end_to_end.ce_dists[0]:.3f} "
        f"dist2 {end_to_end.ce_dists[1]:.3f} mean reward {end_to_end.ce_reward:.3f}\n"
        f"    directional (reported, not asserted): coral mean reward {comparison} ce mean reward",
        flush=True,
    )
    _report(
        7,
        ok,
        f"coral greedy-decode oracle-validity {end_to_end.coral_validity:.3f} (>=0.8) in {end_to_end.coral_seconds:.0f}s (<1800s)",
    )


def test_criterion_8_metrics():
    hyps = [["the", "cat", "sat"], ["a", "b"]]
    checks = [
        bleu([list(h) for h in hyps], [list(h) for h in hyps]) == 1.0,
        bleu([["the", "the", "the"]], [["the", "cat"]], max_n=1) == pytest.approx(1 / 3),
        distinct_n([["a", "b"], ["a", "c"]], 1) == 0.75,
        meteor(["a", "b"], ["a", "b"]) == pytest.approx(0.9375),
    ]

    def reference_bleu(hs, rs, max_n=4):
        hyp_len = sum(len(h) for h in hs)
        ref_len = sum(len(r) for r in rs)
        if hyp_len == 0:
            return 0.0
        log_sum = 0.0
        for n in range(1, max_n + 1):
            matched = total = 0
            for h, r in zip(hs, rs):
                hc = Counter(tuple(h[i : i + n]) for i in range(len(h) - n + 1))
                rc = Counter(tuple(r[i : i + n]) for i in range(len(r) - n + 1))
                total += sum(hc.values())
                matched += sum(min(c, rc[g]) for g, c in hc.items())
            if n >= 2 and matched == 0:
                matched, total = matched + 1, total + 1
            if matched == 0 or total == 0:
                return 0.0
            log_sum += math.log(matched / total)
        bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
        return bp * math.exp(log_sum / max_n)

    rng = np.random.default_rng(17)
    vocab = [f"w{i}" for i in range(10)]
    dual_ok = True
    for _ in range(50):
        n_pairs = int(rng.integers(1, 6))
        hs = [[vocab[i] for i in rng.integers(0, 10, size=rng.integers(1, 10))] for _ in range(n_pairs)]
        rs = [[vocab[i] for i in rng.integers(0, 10, size=rng.integers(1, 10))] for _ in range(n_pairs)]
        if abs(bleu(hs, rs) - reference_bleu(hs, rs)) > 1e-9:
            dual_ok = False
            break
    checks.append(dual_ok)
    _report(8, all(checks), "bleu/meteor/distinct fixed points and 50-corpus dual-implementation agreement to 1e-9")


def test_criterion_9_determinism_and_persistence(world, scorer_bundle, tmp_path):
    s2s_cfg = S2SConfig(vocab_size=world.tokenizer.vocab_size, n_layers=1, n_heads=2, d_model=16, max_context_len=32, max_response_len=10)
    data = TrainingData(world.train_pairs[:60], world.val_pairs[:20], world.pool)

    def cfg(max_epochs):
        return TrainConfig(
            loss="coral",
            batch_size=8,
            max_epochs=max_epochs,
            patience=10,
            seed=21,
            peak_lr=3e-4,
            warmup_steps=10,
            coral=CoralConfig(p_plus=0.8, margin=0.0, candidate_mode="nucleus", top_p=0.9),
        )

    _, log_a = train(data, s2s_cfg, cfg(2), scorer=scorer_bundle.scorer)
    _, log_b = train(data, s2s_cfg, cfg(2), scorer=scorer_bundle.scorer)
    same_runlog = log_a.matches(log_b)

    params = init_s2s_params(s2s_cfg, np.random.default_rng(22))
    from coral.backend import OptimizerState

    opt = OptimizerState(params, peak_lr=1e-3, warmup_steps=5, total_steps=50)
    save_checkpoint(tmp_path / "roundtrip.crl", params, optimizer=opt, meta={"epoch": 1})
    arrays, moments, meta = load_checkpoint(tmp_path / "roundtrip.crl")
    roundtrip_ok = all(arrays[n].tobytes() == p.data.tobytes() for n, p in params.items()) and meta["epoch"] == 1.0

    straight_dir = tmp_path / "straight"
    resumed_dir = tmp_path / "resumed"
    best_a, log_straight = train(data, s2s_cfg, cfg(4), scorer=scorer_bundle.scorer, out_dir=straight_dir)
    train(data, s2s_cfg, cfg(2), scorer=scorer_bundle.scorer, out_dir=resumed_dir)
    best_b, log_resumed = train(
        data, s2s_cfg, cfg(4), scorer=scorer_bundle.scorer, out_dir=resumed_dir, resume_from=resumed_dir / "s2s_last.crl"
    )
    resume_ok = log_straight.matches(log_resumed) and best_a.equal(best_b)

    _report(
        9,
        same_runlog and roundtrip_ok and resume_ok,
        f"runlog determinism {same_runlog}, checkpoint bit-exact {roundtrip_ok}, resumed == uninterrupted {resume_ok}",
    )


def test_criterion_10_ablation_sweep(world, scorer_bundle, tmp_path):
    t0 = time.time()
    data_dir = tmp_path / "data"
    data_dir.mkdir()
    train_dialogs = [
        [world.tokenizer.decode(p.context.flat), world.tokenizer.decode(p.response.token_ids)]
        for p in world.train_pairs[:1000]
    ]
    val_dialogs = [
        [world.tokenizer.decode(p.context.flat), world.tokenizer.decode(p.response.token_ids)]
        for p in world.val_pairs[:120]
    ]
    save_corpus(data_dir / "train.eou", train_dialogs)
    save_corpus(data_dir / "valid.eou", val_dialogs)

    retrieval_dir = tmp_path / "retrieval"
    retrieval_dir.mkdir()
    save_scorer(retrieval_dir / "esim.crl", scorer_bundle.params, scorer_bundle.cfg)
    world.tokenizer.save(retrieval_dir / "vocab.txt")

    config_file = tmp_path / "ablate.cfg"
    config_file.write_text("d_model = 48\nn_layers = 1\npeak_lr = 3e-4\nwarmup_steps = 30\nmax_response_len = 12\n")

    runs = tmp_path / "runs"
    code = cli_main(
        [
            "ablate",
            "--config", str(config_file),
            "--data", str(data_dir),
            "--retrieval", str(retrieval_dir / "esim.crl"),
            "--out", str(runs),
            "--seed", "30",
            "--p-plus-grid", "0.6,0.8,1.0",
            "--margin-grid", "0.0,0.2,0.4",
            "--modes", "nucleus",
            "--epochs", "2",
            "--batch-size", "16",
        ]
    )
    assert code == 0
    run_dir = runs / (runs / "latest").read_text().strip()
    lines = (run_dir / "ablation.csv").read_text().splitlines()
    elapsed = time.time() - t0

    import csv as csv_mod

    with (run_dir / "ablation.csv").open() as fh:
        rows = list(csv_mod.DictReader(fh))
    mix = max(float(r["best_val_r3"]) for r in rows if float(r["p_plus"]) < 1.0)
    off = max(float(r["best_val_r3"]) for r in rows if float(r["p_plus"]) == 1.0)
    print(
        f"    sensitivity sweep: best mix-policy reward {mix:.4f} vs best off-policy {off:.4f} "
        f"(directional echo, reported not asserted)",
        flush=True,
    )
    ok = len(lines) == 10 and (run_dir / "sensitivity.png").exists() and elapsed < 7200
    _report(10, ok, f"3x3 p_plus x margin sweep emitted {len(lines) - 1} rows + figure in {elapsed:.0f}s (<7200s)")
