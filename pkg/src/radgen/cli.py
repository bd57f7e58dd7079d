"""Command-line interface wiring the modules into reproducible runs.

Subcommands: gen-data, train, generate, evaluate, ablate, stats. Every
command is deterministic given (seed, config, corpus); diagnostics go to
stderr, data to files or stdout, exit code 0 on completion.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from radgen.config import Config, load_config
from radgen.corpus import (
    compute_stats,
    format_stats_table,
    generate_synthetic,
    load_corpus,
    save_corpus,
    stats_json,
    tokenize,
)
from radgen.dictionary import AnatomicalDictionary
from radgen.metrics import METRIC_NAMES, evaluate_suite, format_metrics_table, metrics_json

ABLATION_LABELS = {
    "full": "Ours",
    "no_visual": "w/o Φ_visual",
    "no_sem": "w/o Φ_sem",
}


def _load_cfg(args) -> Config:
    return load_config(args.config) if getattr(args, "config", None) else Config()


def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    dictionary = (
        AnatomicalDictionary.from_file(args.entities)
        if args.entities
        else AnatomicalDictionary.default()
    )
    corpus = generate_synthetic(args.seed, args.samples, cfg, dictionary)
    save_corpus(corpus, args.out)
    stats = compute_stats(corpus)
    print(format_stats_table(stats))
    print(stats_json(stats))
    return 0


def cmd_train(args) -> int:
    from radgen.training import train_model

    cfg = _load_cfg(args)
    print(cfg.resolved_text())  # resolved defaults, for provenance
    corpus = load_corpus(args.corpus)
    result = train_model(
        cfg,
        corpus,
        out_dir=args.out,
        resume_from=args.resume,
        log=lambda line: print(line, file=sys.stderr),
    )
    print(f"best validation loss {result.best_val:.6f}", file=sys.stderr)
    print(f"checkpoints written to {args.out}", file=sys.stderr)
    return 0


def _decode_split(checkpoint, corpus_path, split, cfg=None, beam=None):
    from radgen.training import load_model_from_checkpoint

    model, ck = load_model_from_checkpoint(checkpoint, cfg)
    corpus = load_corpus(corpus_path)
    samples = corpus.split(split)
    if not samples:
        raise ValueError(f"corpus has no samples in split {split!r}")
    cands = model.generate(samples, beam=beam)
    return samples, cands


def cmd_generate(args) -> int:
    cfg = load_config(args.config) if args.config else None
    samples, cands = _decode_split(
        args.checkpoint, args.corpus, args.split, cfg, args.beam
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cand_path = out / f"candidates_{args.split}.jsonl"
    ref_path = out / f"references_{args.split}.jsonl"
    with open(cand_path, "w", encoding="utf-8") as fh:
        for s, toks in zip(samples, cands):
            fh.write(json.dumps({"id": s.sid, "text": " ".join(toks)}) + "\n")
    with open(ref_path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps({"id": s.sid, "text": s.report}) + "\n")
    print(f"wrote {cand_path} and {ref_path}", file=sys.stderr)
    return 0


def _read_jsonl_texts(path) -> dict[str, str]:
    rows = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
                rows[rec["id"]] = rec["text"]
            except (json.JSONDecodeError, KeyError) as e:
                raise ValueError(f"{path}: malformed line {lineno}: {e}") from e
    return rows


def _evaluate_files(cand_path, ref_path) -> dict[str, float]:
    cands = _read_jsonl_texts(cand_path)
    refs = _read_jsonl_texts(ref_path)
    if set(cands) != set(refs):
        raise ValueError("candidate and reference ids do not match")
    ids = sorted(cands)
    return evaluate_suite(
        [tokenize(cands[i]) for i in ids], [tokenize(refs[i]) for i in ids]
    )


def cmd_evaluate(args) -> int:
    report = _evaluate_files(args.candidates, args.references)
    print(metrics_json(report))
    print(format_metrics_table({"candidates": report}), file=sys.stderr)
    return 0


def cmd_ablate(args) -> int:
    from radgen.training import evaluate_split, train_model

    cfg = _load_cfg(args).updated(model__branch=args.mode)
    label = ABLATION_LABELS[args.mode]
    corpus = load_corpus(args.corpus)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run_dir = out / f"run_{args.mode}"
    result = train_model(cfg, corpus, out_dir=run_dir,
                         log=lambda line: print(line, file=sys.stderr))
    test = corpus.split("test")
    if not test:
        raise ValueError("corpus has no test split to evaluate")
    report = evaluate_split(result.model, test, decode="beam",
                            beam=cfg["decode.beam"])
    rows_path = out / "ablation.jsonl"
    with open(rows_path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps({"model": label, **report}) + "\n")
    rows = {}
    with open(rows_path, "r", encoding="utf-8") as fh:
        for raw in fh:
            rec = json.loads(raw)
            rows[rec["model"]] = {m: rec[m] for m in METRIC_NAMES}
    table = format_metrics_table(rows)
    (out / "ablation.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return 0


def cmd_stats(args) -> int:
    stats = compute_stats(load_corpus(args.corpus))
    print(format_stats_table(stats))
    print(stats_json(stats))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="radgen",
        description="anatomical-attention report generation experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic corpus")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--samples", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--entities", help="dictionary file (one entity per line)")
    p.add_argument("--config", help="config file for [synthetic] overrides")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="config file; defaults when omitted")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="beam-decode a corpus split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", required=True)
    p.add_argument("--beam", type=int, default=None)
    p.add_argument("--config", help="must match the checkpoint digest when given")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="score candidates against references")
    p.add_argument("--candidates", required=True)
    p.add_argument("--references", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train+decode+score one branch mode")
    p.add_argument("--config", help="config file; defaults when omitted")
    p.add_argument("--mode", required=True, choices=("full", "no_visual", "no_sem"))
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("stats", help="print corpus statistics")
    p.add_argument("--corpus", required=True)
    p.set_defaults(func=cmd_stats)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as e:  # diagnostics to stderr, nonzero exit
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
