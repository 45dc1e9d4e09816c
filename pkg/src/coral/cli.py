"""Command-line entry point.

Commands chain through run directories: synth writes a corpus,
train-retrieval produces a scorer checkpoint plus vocab, train-s2s consumes
both, generate writes one response per test context, evaluate scores the
generations, ablate sweeps the objective's hyperparameters. Every command
echoes its effective config into its run directory and updates a `latest`
pointer file for chaining; report-producing commands render a figure next
to each delimited output.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from pathlib import Path

import numpy as np

from . import figures
from .config import RunConfig, load_config
from .corpus import (
    EOS,
    Tokenizer,
    build_pool,
    build_tokenizer,
    default_grammar,
    generate_synthetic,
    load_corpus,
    make_pairs,
    save_corpus,
)
from .losses import CoralConfig
from .metrics import compute_report
from .retrieval import EsimConfig, load_scorer, save_scorer, train_retrieval
from .s2s import S2SConfig, greedy_decode, nucleus_decode
from .trainer import TrainConfig, TrainingData, load_s2s, train


def make_run_dir(parent, command: str, seed: int) -> Path:
    parent = Path(parent)
    parent.mkdir(parents=True, exist_ok=True)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    run_dir = parent / f"{command}-{seed}-{stamp}"
    suffix = 0
    while run_dir.exists():
        suffix += 1
        run_dir = parent / f"{command}-{seed}-{stamp}-{suffix}"
    run_dir.mkdir()
    (parent / "latest").write_text(run_dir.name + "\n", encoding="utf-8")
    return run_dir


def _overrides_from_args(args) -> dict:
    mapping = {
        "seed": "seed",
        "loss": "loss",
        "p_plus": "p_plus",
        "margin": "margin",
        "mode": "mode",
        "top_p": "top_p",
        "epochs": "epochs",
        "batch_size": "batch_size",
        "decode": "decode",
    }
    overrides = {}
    for arg_name, key in mapping.items():
        value = getattr(args, arg_name, None)
        if value is not None:
            overrides[key] = value
    # train-retrieval reuses the --epochs flag for the scorer's epoch budget
    epochs_key = getattr(args, "epochs_key", None)
    if epochs_key and "epochs" in overrides:
        overrides[epochs_key] = overrides.pop("epochs")
    return overrides


def _config(args) -> RunConfig:
    return load_config(getattr(args, "config", None), overrides=_overrides_from_args(args))


def _corpus_file(data_dir: Path, split: str) -> tuple[Path, str]:
    for ext, fmt in ((".eou", "eou-lines"), (".jsonl", "jsonl")):
        candidate = data_dir / f"{split}{ext}"
        if candidate.exists():
            return candidate, fmt
    raise FileNotFoundError(f"no {split}.eou or {split}.jsonl under {data_dir}")


def _load_split(data_dir, split: str) -> list[list[str]]:
    path, fmt = _corpus_file(Path(data_dir), split)
    return load_corpus(path, fmt)


def _vocab_for(args, fallback_dirs: list[Path]) -> Tokenizer:
    explicit = getattr(args, "vocab", None)
    if explicit:
        return Tokenizer.load(explicit)
    for d in fallback_dirs:
        candidate = Path(d) / "vocab.txt"
        if candidate.exists():
            return Tokenizer.load(candidate)
    raise FileNotFoundError("no vocab.txt found; pass --vocab")


def cmd_synth(args) -> int:
    cfg = _config(args)
    run_dir = make_run_dir(args.out, "synth", cfg.seed)
    grammar = default_grammar()
    rng = np.random.default_rng(cfg.seed)
    sizes = {"train": args.n_train, "valid": args.n_val, "test": args.n_test}
    for split, n in sizes.items():
        dialogs, _ = generate_synthetic(grammar, n, rng)
        save_corpus(run_dir / f"{split}.eou", dialogs)
    (run_dir / "grammar.json").write_text(grammar.to_json(), encoding="utf-8")
    cfg.write(run_dir / "config.txt")
    print(f"synthetic corpus written to {run_dir} ({args.n_train}/{args.n_val}/{args.n_test} dialogs)")
    return 0


def cmd_train_retrieval(args) -> int:
    cfg = _config(args)
    data_dir = Path(args.data)
    train_dialogs = _load_split(data_dir, "train")
    val_dialogs = _load_split(data_dir, "valid")
    tokenizer = build_tokenizer(train_dialogs, cfg.vocab_size)
    train_pairs = make_pairs(train_dialogs, tokenizer, cfg.max_context_turns, cfg.max_context_len)
    val_pairs = make_pairs(val_dialogs, tokenizer, cfg.max_context_turns, cfg.max_context_len)
    pool = build_pool(train_pairs)

    esim_cfg = EsimConfig(
        vocab_size=tokenizer.vocab_size,
        embed_dim=cfg.esim_embed_dim,
        hidden_dim=cfg.esim_hidden_dim,
        mlp_hidden=(cfg.esim_mlp_hidden_1, cfg.esim_mlp_hidden_2),
    )
    run_dir = make_run_dir(args.out, "train-retrieval", cfg.seed)
    cfg.write(run_dir / "config.txt")
    tokenizer.save(run_dir / "vocab.txt")

    params, history = train_retrieval(
        train_pairs,
        pool,
        esim_cfg,
        epochs=cfg.esim_epochs,
        rng=np.random.default_rng(cfg.seed),
        val_pairs=val_pairs,
        negatives_per_positive=cfg.esim_negatives,
        lr=cfg.esim_lr,
        patience=cfg.esim_patience,
        batch_size=cfg.esim_batch_size,
        log=print,
    )
    save_scorer(run_dir / "esim.crl", params, esim_cfg)
    with (run_dir / "retrieval_log.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_auc", "seconds"])
        for row in history:
            writer.writerow([row["epoch"], repr(row["train_loss"]), repr(row["val_auc"]), repr(row["seconds"])])
    figures.save_retrieval_curves(history, run_dir / "retrieval_curves.png")
    best_auc = max((h["val_auc"] for h in history if h["val_auc"] is not None), default=float("nan"))
    print(f"scorer saved to {run_dir / 'esim.crl'} (best val AUC {best_auc:.4f})")
    return 0


def _train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        loss=cfg.loss,
        batch_size=cfg.batch_size,
        max_epochs=cfg.epochs,
        patience=cfg.patience,
        seed=cfg.seed,
        peak_lr=cfg.peak_lr,
        warmup_steps=cfg.warmup_steps,
        clip_norm=cfg.clip_norm,
        coral=CoralConfig(
            p_plus=cfg.p_plus,
            margin=cfg.margin,
            candidate_mode=cfg.mode,
            top_p=cfg.top_p,
            both_terms=cfg.both_terms,
        ),
    )


def cmd_train_s2s(args) -> int:
    cfg = _config(args)
    data_dir = Path(args.data)
    scorer = None
    fallback_vocab_dirs = []
    if args.retrieval:
        ckpt = Path(args.retrieval)
        if not ckpt.exists():
            print(f"error: retrieval checkpoint not found: {ckpt}", file=sys.stderr)
            return 1
        scorer, _, _ = load_scorer(ckpt)
        fallback_vocab_dirs.append(ckpt.parent)
    elif cfg.loss == "coral":
        print("error: --loss coral requires --retrieval <esim.crl>", file=sys.stderr)
        return 1

    train_dialogs = _load_split(data_dir, "train")
    val_dialogs = _load_split(data_dir, "valid")
    try:
        tokenizer = _vocab_for(args, fallback_vocab_dirs)
    except FileNotFoundError:
        tokenizer = build_tokenizer(train_dialogs, cfg.vocab_size)
    train_pairs = make_pairs(train_dialogs, tokenizer, cfg.max_context_turns, cfg.max_context_len)
    val_pairs = make_pairs(val_dialogs, tokenizer, cfg.max_context_turns, cfg.max_context_len)
    data = TrainingData(train_pairs=train_pairs, val_pairs=val_pairs, pool=build_pool(train_pairs))

    s2s_cfg = S2SConfig(
        vocab_size=tokenizer.vocab_size,
        n_layers=cfg.n_layers,
        n_heads=cfg.n_heads,
        d_model=cfg.d_model,
        max_context_len=cfg.max_context_len,
        max_response_len=cfg.max_response_len,
        dropout=cfg.dropout,
    )
    run_dir = make_run_dir(args.out, "train-s2s", cfg.seed)
    cfg.write(run_dir / "config.txt")
    tokenizer.save(run_dir / "vocab.txt")

    best_params, runlog = train(
        data,
        s2s_cfg,
        _train_config(cfg),
        scorer=scorer,
        out_dir=run_dir,
        resume_from=args.resume,
        log=print,
    )
    figures.save_training_curves(
        runlog,
        run_dir / "training_curves.png",
        val_label="validation reward" if scorer is not None else "negative validation CE",
    )
    print(f"best epoch {runlog.best_epoch}; checkpoints and runlog.csv in {run_dir}")
    return 0


def cmd_generate(args) -> int:
    cfg = _config(args)
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        print(f"error: checkpoint not found: {ckpt}", file=sys.stderr)
        return 1
    params, s2s_cfg, _ = load_s2s(ckpt)
    tokenizer = _vocab_for(args, [ckpt.parent])
    test_dialogs = _load_split(Path(args.data), "test")
    pairs = make_pairs(test_dialogs, tokenizer, cfg.max_context_turns, cfg.max_context_len)

    run_dir = make_run_dir(args.out, "generate", cfg.seed)
    cfg.write(run_dir / "config.txt")
    tokenizer.save(run_dir / "vocab.txt")
    rng = np.random.default_rng(cfg.seed)
    lines = []
    for pair in pairs:
        if cfg.decode == "nucleus":
            decoded = nucleus_decode(pair.context.flat, params, s2s_cfg, top_p=cfg.top_p, rng=rng)
        else:
            decoded = greedy_decode(pair.context.flat, params, s2s_cfg)
        lines.append(tokenizer.decode([t for t in decoded.token_ids if t != EOS]))
    (run_dir / "generations.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"{len(lines)} generations written to {run_dir / 'generations.txt'}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    gen_path = Path(args.generations)
    if not gen_path.exists():
        print(f"error: generations file not found: {gen_path}", file=sys.stderr)
        return 1
    scorer = None
    fallback_dirs = [gen_path.parent]
    if args.retrieval:
        ckpt = Path(args.retrieval)
        if not ckpt.exists():
            print(f"error: retrieval checkpoint not found: {ckpt}", file=sys.stderr)
            return 1
        scorer, _, _ = load_scorer(ckpt)
        fallback_dirs.append(ckpt.parent)
    tokenizer = _vocab_for(args, fallback_dirs)
    test_dialogs = _load_split(Path(args.data), "test")
    pairs = make_pairs(test_dialogs, tokenizer, cfg.max_context_turns, cfg.max_context_len)
    hyp_lines = [ln for ln in gen_path.read_text(encoding="utf-8").splitlines()]
    if len(hyp_lines) != len(pairs):
        print(f"error: {len(hyp_lines)} generations but {len(pairs)} test contexts", file=sys.stderr)
        return 1

    from .corpus import surface_split

    hyp_tokens = [surface_split(ln) for ln in hyp_lines]
    ref_tokens = [tokenizer.decode(p.response.token_ids).split() for p in pairs]
    contexts = [p.context.flat for p in pairs]
    hyp_ids = [tokenizer.encode(ln) for ln in hyp_lines]
    report = compute_report(hyp_tokens, ref_tokens, contexts, hyp_ids, scorer)

    run_dir = make_run_dir(args.out, "evaluate", cfg.seed)
    cfg.write(run_dir / "config.txt")
    (run_dir / "metrics.json").write_text(report.to_json() + "\n", encoding="utf-8")
    figures.save_metrics_bar(report, run_dir / "metrics_summary.png")
    print(report.to_json())
    print(f"report written to {run_dir / 'metrics.json'}")
    return 0


def _parse_grid(raw: str, kind=float) -> list:
    values = [kind(part) for part in raw.split(",") if part.strip() != ""]
    if not values:
        raise ValueError(f"empty grid: {raw!r}")
    return values


def cmd_ablate(args) -> int:
    cfg = _config(args)
    ckpt = Path(args.retrieval)
    if not ckpt.exists():
        print(f"error: retrieval checkpoint not found: {ckpt}", file=sys.stderr)
        return 1
    scorer, _, _ = load_scorer(ckpt)
    tokenizer = _vocab_for(args, [ckpt.parent])
    data_dir = Path(args.data)
    train_dialogs = _load_split(data_dir, "train")
    val_dialogs = _load_split(data_dir, "valid")
    train_pairs = make_pairs(train_dialogs, tokenizer, cfg.max_context_turns, cfg.max_context_len)
    val_pairs = make_pairs(val_dialogs, tokenizer, cfg.max_context_turns, cfg.max_context_len)
    data = TrainingData(train_pairs=train_pairs, val_pairs=val_pairs, pool=build_pool(train_pairs))
    s2s_cfg = S2SConfig(
        vocab_size=tokenizer.vocab_size,
        n_layers=cfg.n_layers,
        n_heads=cfg.n_heads,
        d_model=cfg.d_model,
        max_context_len=cfg.max_context_len,
        max_response_len=cfg.max_response_len,
        dropout=cfg.dropout,
    )

    p_grid = _parse_grid(args.p_plus_grid)
    m_grid = _parse_grid(args.margin_grid)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    run_dir = make_run_dir(args.out, "ablate", cfg.seed)
    cfg.write(run_dir / "config.txt")

    rows: list[dict] = []
    for mode in modes:
        for p_plus in p_grid:
            for margin in m_grid:
                cell_cfg = _train_config(cfg)
                cell_cfg.loss = "coral"
                cell_cfg.coral = CoralConfig(
                    p_plus=p_plus, margin=margin, candidate_mode=mode, top_p=cfg.top_p, both_terms=cfg.both_terms
                )
                cell_dir = run_dir / "cells" / f"p{p_plus:g}_m{margin:g}_{mode}"
                _, runlog = train(data, s2s_cfg, cell_cfg, scorer=scorer, out_dir=cell_dir)
                best = runlog.records[runlog.best_epoch - 1]
                rows.append(
                    {
                        "p_plus": p_plus,
                        "margin": margin,
                        "mode": mode,
                        "best_val_r3": best.val_r3,
                        "best_epoch": best.epoch,
                    }
                )
                print(f"cell p+={p_plus:g} m={margin:g} {mode}: best val {best.val_r3:.4f} @ epoch {best.epoch}")

    with (run_dir / "ablation.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["p_plus", "margin", "mode", "best_val_r3", "best_epoch"])
        for row in rows:
            writer.writerow([row["p_plus"], row["margin"], row["mode"], repr(row["best_val_r3"]), row["best_epoch"]])
    figures.save_sensitivity_plot(rows, run_dir / "sensitivity.png")

    mix_rows = [r for r in rows if r["p_plus"] < 1.0]
    off_rows = [r for r in rows if r["p_plus"] == 1.0]
    if mix_rows and off_rows:
        best_mix = max(r["best_val_r3"] for r in mix_rows)
        best_off = max(r["best_val_r3"] for r in off_rows)
        relation = ">=" if best_mix >= best_off else "<"
        print(f"best mix-policy reward {best_mix:.4f} {relation} best off-policy reward {best_off:.4f}")
    print(f"ablation table written to {run_dir / 'ablation.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coral", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", default=None, help="key = value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default="runs", help="parent directory for run directories")
        if data:
            p.add_argument("--data", required=True, help="directory with train/valid/test corpus files")

    p = sub.add_parser("synth", help="generate the synthetic grammar corpus")
    common(p, data=False)
    p.add_argument("--n-train", type=int, default=5000)
    p.add_argument("--n-val", type=int, default=300)
    p.add_argument("--n-test", type=int, default=300)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train-retrieval", help="train the compatibility scorer")
    common(p)
    p.add_argument("--epochs", type=int, default=None, help="override esim_epochs")
    p.set_defaults(fn=cmd_train_retrieval, epochs_key="esim_epochs")

    p = sub.add_parser("train-s2s", help="train the response generator (ce or coral)")
    common(p)
    p.add_argument("--retrieval", default=None, help="scorer checkpoint (required for --loss coral)")
    p.add_argument("--vocab", default=None)
    p.add_argument("--resume", default=None, help="resume from an s2s_last.crl checkpoint")
    p.add_argument("--loss", choices=["ce", "coral"], default=None)
    p.add_argument("--p-plus", dest="p_plus", type=float, default=None)
    p.add_argument("--margin", type=float, default=None)
    p.add_argument("--mode", choices=["nucleus", "random-negative"], default=None)
    p.add_argument("--top-p", dest="top_p", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.set_defaults(fn=cmd_train_s2s)

    p = sub.add_parser("generate", help="decode responses for the test contexts")
    common(p)
    p.add_argument("--checkpoint", required=True, help="s2s checkpoint")
    p.add_argument("--vocab", default=None)
    p.add_argument("--decode", choices=["greedy", "nucleus"], default=None)
    p.add_argument("--top-p", dest="top_p", type=float, default=None)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("evaluate", help="score a generations file against the test set")
    common(p)
    p.add_argument("--generations", required=True)
    p.add_argument("--retrieval", default=None, help="scorer checkpoint for the reference-free metric")
    p.add_argument("--vocab", default=None)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("ablate", help="sweep p_plus x margin x candidate mode")
    common(p)
    p.add_argument("--retrieval", required=True)
    p.add_argument("--vocab", default=None)
    p.add_argument("--p-plus-grid", dest="p_plus_grid", default="0.6,0.8,1.0")
    p.add_argument("--margin-grid", dest="margin_grid", default="0.0,0.2,0.4")
    p.add_argument("--modes", default="nucleus")
    p.add_argument("--epochs", type=int, default=None, help="epochs per cell")
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--top-p", dest="top_p", type=float, default=None)
    p.set_defaults(fn=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
