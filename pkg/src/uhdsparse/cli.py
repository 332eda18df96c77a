"""Command-line surface: one binary, subcommands for each pipeline stage.

Exit codes: 0 success, 2 usage or configuration problems, 3 malformed or
inconsistent data files, 4 numeric failure during training.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import Iterable, Iterator, Sequence

from uhdsparse.encoder import read_embedding_file
from uhdsparse.errors import (
    CorruptFileError,
    DataError,
    FormatError,
    TrainingDivergedError,
    UhdError,
)
from uhdsparse.evaluation import (
    DEFAULT_WEIGHT_CANDIDATES,
    build_run,
    density_profile,
    ideal_layer_oracle,
    interpret_dimensions,
    mrr_at,
    read_qrels,
    read_run,
    recall_at,
    tune_bucket_weights,
    write_run,
)
from uhdsparse.index import build_index, index_stats, read_index, search, write_index
from uhdsparse.model import SparseModel, load_checkpoint, save_checkpoint
from uhdsparse.tokenizer import split_words, tokenize
from uhdsparse.training import TrainConfig, load_triples, train

__all__ = ["main"]


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be positive, got {value}")
    return value


def _read_tsv_pairs(path: str, what: str) -> Iterator[tuple[str, str]]:
    """Yield (id, text) from a two-column TSV, naming bad lines."""
    seen = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(
                    f"{path}:{lineno}: expected `id TAB text`, got {len(parts)} fields"
                )
            rid, text = parts
            if rid in seen:
                raise DataError(f"{path}:{lineno}: duplicate {what} id {rid!r}")
            seen.add(rid)
            yield rid, text


def _encode_many(
    model: SparseModel,
    pairs: Sequence[tuple[str, str]],
    is_query: bool,
    infer_k: int | None,
    threads: int,
):
    def encode(pair):
        rid, text = pair
        try:
            return rid, model.encode_text(text, is_query=is_query, infer_k=infer_k)
        except DataError as exc:
            raise DataError(f"{rid}: {exc}") from None

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            yield from pool.map(encode, pairs)
    else:
        yield from map(encode, pairs)


def _parse_weights(text: str) -> tuple[float, ...]:
    try:
        weights = tuple(float(p) for p in text.split(":"))
    except ValueError:
        raise ValueError(f"bad weight vector {text!r}, expected like 1:0:0.5") from None
    if not weights or any(w < 0 for w in weights):
        raise ValueError("weights must be nonnegative and nonempty")
    return weights


def _format_weight(w: float) -> str:
    return f"{w:g}"


def cmd_train(args) -> int:
    with open(args.config, encoding="utf-8") as f:
        raw = json.load(f)
    if not isinstance(raw, dict):
        raise ValueError("config must be a JSON object")
    if args.seed is not None:
        raw["seed"] = args.seed
    config = TrainConfig.from_dict(raw)
    triples = load_triples(args.triples)
    loss_log = args.loss_log or f"{args.out}.loss.csv"
    model, history = train(triples, config, loss_log_path=loss_log)
    save_checkpoint(model, args.out)
    print(f"steps\t{len(history)}")
    if history:
        print(f"final_loss\t{history[-1].mean_loss:.4f}")
    return 0


def _docs_from_args(args, model: SparseModel):
    if args.embeddings:
        return (
            (rid, model.encode_dense(layers, infer_k=args.infer_k))
            for rid, layers in read_embedding_file(args.embeddings)
        )
    pairs = list(_read_tsv_pairs(args.collection, "doc"))
    return _encode_many(model, pairs, False, args.infer_k, args.threads)


def cmd_index(args) -> int:
    model = load_checkpoint(args.checkpoint)
    index = build_index(_docs_from_args(args, model))
    write_index(index, args.out)
    print(f"docs\t{index.doc_count}")
    print(f"postings\t{index.postings_count}")
    return 0


def cmd_search(args) -> int:
    index = read_index(args.index)
    weights = _parse_weights(args.weights) if args.weights else None

    def finish(rep):
        if weights is not None:
            rep = rep.with_weights(weights)
        try:
            return search(index, rep, args.k)
        except ValueError as exc:
            raise DataError(str(exc)) from None

    if args.embeddings:
        model = load_checkpoint(args.checkpoint)
        results = {
            rid: finish(model.encode_dense(layers, infer_k=args.infer_k))
            for rid, layers in read_embedding_file(args.embeddings)
        }
    elif args.query is not None:
        model = load_checkpoint(args.checkpoint)
        rep = model.encode_text(args.query, is_query=True, infer_k=args.infer_k)
        for rank, (docid, score) in enumerate(finish(rep), start=1):
            print(f"{rank}\t{docid}\t{score:.6f}")
        return 0
    else:
        model = load_checkpoint(args.checkpoint)
        pairs = list(_read_tsv_pairs(args.queries, "query"))
        results = {
            qid: finish(rep)
            for qid, rep in _encode_many(model, pairs, True, args.infer_k, args.threads)
        }
    run = build_run(results)
    write_run(run, args.out, tag=args.tag)
    print(f"queries\t{len(run)}")
    return 0


def cmd_eval(args) -> int:
    run = read_run(args.run)
    qrels = read_qrels(args.qrels)
    print(f"mrr@10\t{mrr_at(run, qrels, 10):.4f}")
    for cutoff in args.recall:
        print(f"recall@{cutoff}\t{recall_at(run, qrels, cutoff):.4f}")
    return 0


def cmd_tune(args) -> int:
    run = read_run(args.run)
    qrels = read_qrels(args.qrels)
    model = load_checkpoint(args.checkpoint)
    queries = dict(_read_tsv_pairs(args.queries, "query"))
    texts = dict(_read_tsv_pairs(args.collection, "doc"))
    candidates = {}
    for qid, ranked in run.items():
        if qid not in queries:
            raise DataError(f"run query {qid!r} missing from {args.queries}")
        candidates[qid] = [docid for docid, _ in ranked[: args.depth]]
    query_reps = dict(
        _encode_many(
            model,
            [(qid, queries[qid]) for qid in sorted(candidates)],
            True,
            args.infer_k,
            args.threads,
        )
    )
    needed = sorted({d for docs in candidates.values() for d in docs})
    missing = [d for d in needed if d not in texts]
    if missing:
        raise DataError(f"candidate doc {missing[0]!r} missing from {args.collection}")
    doc_reps = dict(
        _encode_many(
            model,
            [(d, texts[d]) for d in needed],
            False,
            args.infer_k,
            args.threads,
        )
    )
    bucket_count = len(model.plan)
    grid = None
    if args.grid:
        axis = tuple(float(c) for c in args.grid.split(","))
        grid = [axis] * bucket_count
    result = tune_bucket_weights(
        candidates, query_reps, doc_reps, qrels, grid=grid
    )
    print(":".join(_format_weight(w) for w in result.weights))
    print(f"mrr@10\t{result.mrr:.4f}")
    if args.oracle:
        oracle, _ = ideal_layer_oracle(candidates, query_reps, doc_reps, qrels)
        print(f"oracle_mrr@10\t{oracle:.4f}")
    return 0


def cmd_analyze(args) -> int:
    if args.action == "stats":
        index = read_index(args.index)
        with open(args.out, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(
                ["layer", "aspect", "postings", "active_dims", "mean_posting_length"]
            )
            for s in index_stats(index):
                writer.writerow(
                    [
                        s.descriptor.layer_index,
                        s.descriptor.aspect_index,
                        s.postings_count,
                        s.active_dims,
                        f"{s.mean_posting_length:.4f}",
                    ]
                )
        return 0

    model = load_checkpoint(args.checkpoint)
    if model.tokenizer is None:
        raise DataError("checkpoint carries no tokenizer; analyze needs text encoding")
    is_query = args.queries is not None
    source = args.queries if is_query else args.collection
    pairs = list(_read_tsv_pairs(source, "query" if is_query else "doc"))

    if args.action == "density":
        def stream():
            for rid, text in pairs:
                ids = tokenize(text, model.tokenizer, is_query=is_query)
                rep = model.encode_text(text, is_query=is_query, infer_k=args.infer_k)
                yield len(ids), rep

        table = density_profile(stream())
        with open(args.out, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["length", "mean_density"])
            for length, density in table.items():
                writer.writerow([length, f"{density:.8f}"])
        return 0

    def term_stream():
        cap = (
            model.tokenizer.max_query_tokens
            if is_query
            else model.tokenizer.max_doc_tokens
        )
        for rid, text in pairs:
            terms = split_words(text, model.tokenizer.lowercase)[:cap]
            rep = model.encode_text(text, is_query=is_query, infer_k=args.infer_k)
            yield terms, rep

    table = interpret_dimensions(term_stream(), min_term_count=args.min_term_count)
    with open(args.out, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["bucket", "dimension", "term", "count"])
        for (bucket, dim) in sorted(table):
            for term, count in table[(bucket, dim)]:
                writer.writerow([bucket, dim, term, count])
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uhdsparse",
        description="Train, index, search and analyze sparse bucketed retrieval models.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--threads",
        type=_positive_int,
        default=os.cpu_count() or 1,
        help="worker threads for batch encoding",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train a model from triples")
    p.add_argument("--triples", required=True)
    p.add_argument("--config", required=True, help="JSON training configuration")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--loss-log", help="loss CSV path (default: <out>.loss.csv)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("index", parents=[common], help="build an inverted index")
    p.add_argument("--checkpoint", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--collection", help="doc TSV `doc_id TAB text`")
    src.add_argument("--embeddings", help="precomputed embedding file")
    p.add_argument("--infer-k", type=_positive_int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("search", parents=[common], help="query an index")
    p.add_argument("--index", required=True)
    p.add_argument("--checkpoint", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--query", help="single query text, results to stdout")
    src.add_argument("--queries", help="query TSV `query_id TAB text`")
    src.add_argument("--embeddings", help="precomputed query embeddings")
    p.add_argument("--k", type=_positive_int, default=10)
    p.add_argument("--infer-k", type=_positive_int, default=None)
    p.add_argument("--weights", help="query-time bucket weights like 1:0:0.5")
    p.add_argument("--out", help="run file path (batch modes)")
    p.add_argument("--tag", default="uhd", help="run tag column")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("eval", parents=[common], help="score a run against qrels")
    p.add_argument("--run", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument(
        "--recall",
        type=_positive_int,
        action="append",
        default=[],
        help="also report recall at this cutoff (repeatable)",
    )
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("tune", parents=[common], help="grid-search bucket weights")
    p.add_argument("--run", required=True, help="candidate run to re-rank")
    p.add_argument("--qrels", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--collection", required=True)
    p.add_argument("--depth", type=_positive_int, default=100)
    p.add_argument("--infer-k", type=_positive_int, default=None)
    p.add_argument(
        "--grid",
        help="comma-separated candidate weights per bucket "
        f"(default {','.join(str(round(c, 4)) for c in DEFAULT_WEIGHT_CANDIDATES)})",
    )
    p.add_argument("--oracle", action="store_true", help="also report the per-query bucket oracle")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("analyze", parents=[common], help="write analysis CSVs")
    p.add_argument("action", choices=["density", "interpret", "stats"])
    p.add_argument("--checkpoint")
    p.add_argument("--index")
    p.add_argument("--queries")
    p.add_argument("--collection")
    p.add_argument("--infer-k", type=_positive_int, default=None)
    p.add_argument("--min-term-count", type=_positive_int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)
    return parser


def _validate_analyze(args) -> None:
    if args.action == "stats":
        if not args.index:
            raise ValueError("analyze stats needs --index")
        return
    if not args.checkpoint:
        raise ValueError(f"analyze {args.action} needs --checkpoint")
    if args.action == "interpret":
        if not args.queries:
            raise ValueError("analyze interpret needs --queries")
    elif not (args.queries or args.collection):
        raise ValueError("analyze density needs --queries or --collection")


def main(argv: Sequence[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.func is cmd_analyze:
            _validate_analyze(args)
        if args.func is cmd_search and args.query is None and not args.out:
            raise ValueError("batch search needs --out for the run file")
        return args.func(args)
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except (DataError, FormatError, CorruptFileError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except UhdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
