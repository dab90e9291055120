"""Command-line entry points: index, train, eval, sweep, serve, bench-gen."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import evalkit, multitask, pipeline
from .corpus import ingest_corpus, load_squad
from .encoder import EncoderConfig, init_parameters, load_checkpoint, save_checkpoint
from .retriever import BM25Params, build_artifact, load_artifact, save_artifact


def _cmd_index(args: argparse.Namespace) -> None:
    ingest = ingest_corpus([args.corpus], args.granularity, args.stride)
    artifact = build_artifact(ingest, args.granularity, args.stride, BM25Params(args.k1, args.b))
    save_artifact(artifact, args.out)
    stats = {
        "documents": ingest.stats.n_documents,
        "chunks": ingest.stats.n_chunks,
        "mean_chunk_tokens": ingest.stats.mean_chunk_tokens,
        "terms": len(artifact.index.terms),
        "granularity": args.granularity,
        "stride": args.stride,
        "out": str(args.out),
    }
    print(json.dumps(stats))


def _train_once(squad_path, index_path, out_path, args) -> None:
    artifact = load_artifact(index_path)
    squad = load_squad(squad_path)
    vocab = evalkit.build_vocab(artifact, squad)
    enc_cfg = EncoderConfig(
        vocab_size=len(vocab),
        d_model=args.d_model,
        n_layers=args.n_layers,
        n_heads=args.n_heads,
        d_ff=args.d_ff,
        max_seq_len=args.max_seq_len,
        dropout_rate=args.dropout,
    )
    qa_data = evalkit.build_qa_dataset(squad, artifact, vocab, enc_cfg.max_seq_len)
    scoring_data, retention = evalkit.build_scorer_dataset(squad, artifact, vocab, n=args.retrieve_n)
    if not qa_data or not scoring_data:
        raise ValueError(
            f"dataset build produced {len(qa_data)} QA and {len(scoring_data)} scoring "
            f"examples; need both non-empty"
        )
    print(
        f"datasets: {len(qa_data)} QA examples, {len(scoring_data)} scoring examples "
        f"(retention {retention:.3f})",
        file=sys.stderr,
    )
    cfg = multitask.TrainConfig(
        total_steps=args.steps,
        lr_qa=args.lr_qa,
        lr_score=args.lr_score,
        batch_qa=args.batch_qa,
        effective_batch_score=args.accum_score,
        weight_decay=args.weight_decay,
        seed=args.seed,
    )
    params = init_parameters(enc_cfg, seed=args.seed)
    result = multitask.train(params, scoring_data, qa_data, cfg)
    save_checkpoint(result.params, out_path, vocab)
    loss_log = args.loss_log or (str(out_path) + ".losses.csv")
    multitask.write_loss_log(result.log, loss_log)
    print(json.dumps({"checkpoint": str(out_path), "loss_log": str(loss_log), "steps": args.steps}))


def _cmd_train(args: argparse.Namespace) -> None:
    _train_once(args.squad, args.index, args.out, args)


def _parse_int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _cmd_eval(args: argparse.Namespace) -> None:
    artifact = load_artifact(args.index)
    params, vocab = load_checkpoint(args.checkpoint)
    if vocab is None:
        raise ValueError(f"missing vocabulary file next to {args.checkpoint}")
    squad = load_squad(args.squad)
    k_values = _parse_int_list(args.k)
    reports = pipeline.evaluate_open(
        squad, args.n_retrieve, k_values, params, vocab, artifact, args.max_answer_len
    )
    print(json.dumps({str(k): reports[k].to_dict() for k in sorted(reports)}))


def _cmd_sweep(args: argparse.Namespace) -> None:
    from .corpus import read_jsonl_documents

    documents = read_jsonl_documents(args.corpus)
    squad = load_squad(args.squad)
    settings = []
    for pair in args.pairs.split(","):
        g, s = pair.split(":")
        settings.append((int(g), int(s)))
    n_values = _parse_int_list(args.n_values)
    k_values = _parse_int_list(args.k)

    params_per_setting = []
    for g, s in settings:
        ingest = ingest_corpus(documents, g, s)
        artifact = build_artifact(ingest, g, s)
        vocab = evalkit.build_vocab(artifact, squad)
        enc_cfg = EncoderConfig(
            vocab_size=len(vocab),
            d_model=args.d_model,
            n_layers=args.n_layers,
            n_heads=args.n_heads,
            d_ff=args.d_ff,
            max_seq_len=args.max_seq_len,
            dropout_rate=args.dropout,
        )
        qa_data = evalkit.build_qa_dataset(squad, artifact, vocab, enc_cfg.max_seq_len)
        scoring_data, _ = evalkit.build_scorer_dataset(squad, artifact, vocab, n=args.retrieve_n)
        cfg = multitask.TrainConfig(
            total_steps=args.steps,
            lr_qa=args.lr_qa,
            lr_score=args.lr_score,
            batch_qa=args.batch_qa,
            effective_batch_score=args.accum_score,
            weight_decay=args.weight_decay,
            seed=args.seed,
        )
        params = init_parameters(enc_cfg, seed=args.seed)
        result = multitask.train(params, scoring_data, qa_data, cfg)
        params_per_setting.append((result.params, vocab))
        print(f"trained setting G={g} S={s}", file=sys.stderr)

    rows = evalkit.granularity_sweep(
        documents, squad, settings, params_per_setting, n_values, k_values, args.max_answer_len
    )
    evalkit.write_sweep_csv(rows, args.out)
    by_g = {}
    for r in rows:
        by_g.setdefault((r.granularity, r.stride), []).append(r.f1)
    ordering = sorted(by_g.items(), key=lambda kv: -max(kv[1]))
    print(json.dumps({
        "out": str(args.out),
        "best_setting_by_f1": [f"G={g} S={s}" for (g, s), _ in ordering],
    }))


def _cmd_serve(args: argparse.Namespace) -> None:
    from .service import load_service_config, serve

    overrides = {
        "index_path": args.index,
        "checkpoint_path": args.checkpoint,
        "host": args.host,
        "port": args.port,
        "n_retrieve": args.n_retrieve,
        "k": args.k,
        "max_answer_len": args.max_answer_len,
    }
    serve(load_service_config(overrides))


def _cmd_bench_gen(args: argparse.Namespace) -> None:
    documents, squad = evalkit.generate_synthetic_benchmark(args.docs, args.questions, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    evalkit.write_corpus_jsonl(documents, out / "corpus.jsonl")
    evalkit.write_squad_json(squad, out / "squad_all.json")
    train_set, heldout = evalkit.split_squad(squad, args.held_out)
    evalkit.write_squad_json(train_set, out / "squad_train.json")
    evalkit.write_squad_json(heldout, out / "squad_heldout.json")
    print(json.dumps({
        "out": str(out),
        "documents": len(documents),
        "questions": len(squad.entries),
        "train_questions": len(train_set.entries),
        "heldout_questions": len(heldout.entries),
    }))


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--steps", type=int, default=1000, help="total alternating updates")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr-qa", type=float, default=5e-5, dest="lr_qa")
    p.add_argument("--lr-score", type=float, default=1e-5, dest="lr_score")
    p.add_argument("--batch-qa", type=int, default=32, dest="batch_qa")
    p.add_argument("--accum-score", type=int, default=16, dest="accum_score",
                   help="scoring examples accumulated per update")
    p.add_argument("--weight-decay", type=float, default=0.01, dest="weight_decay")
    p.add_argument("--retrieve-n", type=int, default=30, dest="retrieve_n",
                   help="paragraphs retrieved per question when building the scoring set")
    p.add_argument("--d-model", type=int, default=64, dest="d_model")
    p.add_argument("--n-layers", type=int, default=2, dest="n_layers")
    p.add_argument("--n-heads", type=int, default=4, dest="n_heads")
    p.add_argument("--d-ff", type=int, default=256, dest="d_ff")
    p.add_argument("--max-seq-len", type=int, default=256, dest="max_seq_len")
    p.add_argument("--dropout", type=float, default=0.1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixqa", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("index", help="chunk a JSONL corpus and build the search index")
    p.add_argument("corpus")
    p.add_argument("out")
    p.add_argument("--granularity", type=int, default=100)
    p.add_argument("--stride", type=int, default=50)
    p.add_argument("--k1", type=float, default=1.2)
    p.add_argument("--b", type=float, default=0.75)
    p.set_defaults(func=_cmd_index)

    p = sub.add_parser("train", help="train the multi-task reader against an index")
    p.add_argument("squad")
    p.add_argument("index")
    p.add_argument("out")
    p.add_argument("--loss-log", default=None, dest="loss_log")
    _add_train_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="open-domain EM/F1/precision@1 on a SQuAD file")
    p.add_argument("squad")
    p.add_argument("index")
    p.add_argument("checkpoint")
    p.add_argument("--n-retrieve", type=int, default=100, dest="n_retrieve")
    p.add_argument("--k", default="1,2,3")
    p.add_argument("--max-answer-len", type=int, default=30, dest="max_answer_len")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sweep", help="train+evaluate across (granularity, stride) settings")
    p.add_argument("corpus")
    p.add_argument("squad")
    p.add_argument("out", help="output CSV path")
    p.add_argument("--pairs", default="100:50,200:100,400:300")
    p.add_argument("--n-values", default="100,150,200", dest="n_values")
    p.add_argument("--k", default="1")
    p.add_argument("--max-answer-len", type=int, default=30, dest="max_answer_len")
    _add_train_flags(p)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("serve", help="run the HTTP query service")
    p.add_argument("--index", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--host", default=None)
    p.add_argument("--port", type=int, default=None)
    p.add_argument("--n-retrieve", type=int, default=None, dest="n_retrieve")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--max-answer-len", type=int, default=None, dest="max_answer_len")
    p.set_defaults(func=_cmd_serve)

    p = sub.add_parser("bench-gen", help="generate the synthetic fact-lookup benchmark")
    p.add_argument("--docs", type=int, default=200)
    p.add_argument("--questions", type=int, default=200)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--held-out", type=int, default=50, dest="held_out")
    p.add_argument("--out", default="bench")
    p.set_defaults(func=_cmd_bench_gen)

    return parser


def main(argv: list[str] | None = None) -> None:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except Exception as e:  # uniform nonzero exit with a diagnostic
        print(f"mixqa {args.command}: error: {e}", file=sys.stderr)
        sys.exit(2)


if __name__ == "__main__":
    main()
