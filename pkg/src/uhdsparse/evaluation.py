"""Ranking metrics, bucket-weight tuning, and embedding analyses.

Runs are rank-ordered doc lists per query; qrels map queries to their
relevant doc sets.  Score ties inside a run break by ascending external
doc id so rankings never depend on accumulation order.
"""

from __future__ import annotations

import itertools
import os
import warnings
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from uhdsparse.errors import DataError
from uhdsparse.sparse import BucketedRepresentation, dot

__all__ = [
    "DEFAULT_WEIGHT_CANDIDATES",
    "TuneResult",
    "read_qrels",
    "write_qrels",
    "read_run",
    "write_run",
    "build_run",
    "mrr_at",
    "recall_at",
    "tune_bucket_weights",
    "ideal_layer_oracle",
    "density_profile",
    "interpret_dimensions",
]

Qrels = dict[str, set[str]]
Run = dict[str, list[tuple[str, float]]]

DEFAULT_WEIGHT_CANDIDATES = (0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0)


def read_qrels(path: str | os.PathLike) -> Qrels:
    """Parse `qid 0 docid rel` lines; a doc is relevant when rel > 0."""
    qrels: Qrels = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 4:
                raise DataError(
                    f"{path}:{lineno}: expected 4 whitespace-separated fields"
                )
            qid, _, docid, rel = parts
            try:
                relevant = int(rel) > 0
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad relevance {rel!r}") from None
            if relevant:
                qrels.setdefault(qid, set()).add(docid)
    return qrels


def write_qrels(qrels: Mapping[str, set[str]], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for qid in sorted(qrels):
            for docid in sorted(qrels[qid]):
                f.write(f"{qid} 0 {docid} 1\n")


def build_run(
    results: Mapping[str, Sequence[tuple[str, float]]],
) -> Run:
    """Order each query's scored docs into a run, ties by ascending id."""
    run: Run = {}
    for qid, scored in results.items():
        ordered = sorted(scored, key=lambda pair: (-pair[1], pair[0]))
        run[qid] = [(docid, float(score)) for docid, score in ordered]
    return run


def write_run(run: Run, path: str | os.PathLike, tag: str = "uhd") -> None:
    with open(path, "w", encoding="utf-8") as f:
        for qid in sorted(run):
            for rank, (docid, score) in enumerate(run[qid], start=1):
                f.write(f"{qid} Q0 {docid} {rank} {score:.6f} {tag}\n")


def read_run(path: str | os.PathLike) -> Run:
    """Parse `qid Q0 docid rank score tag` lines, checking that ranks are
    contiguous from 1 and scores never increase within a query."""
    run: Run = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 6:
                raise DataError(
                    f"{path}:{lineno}: expected 6 whitespace-separated fields"
                )
            qid, _, docid, rank_s, score_s, _ = parts
            try:
                rank, score = int(rank_s), float(score_s)
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad rank or score") from None
            ranked = run.setdefault(qid, [])
            if rank != len(ranked) + 1:
                raise DataError(
                    f"{path}:{lineno}: rank {rank} breaks contiguity for {qid}"
                )
            if ranked and score > ranked[-1][1]:
                raise DataError(f"{path}:{lineno}: score increases within {qid}")
            ranked.append((docid, score))
    return run


def _evaluated_queries(run: Run, qrels: Mapping[str, set[str]], what: str):
    known = [qid for qid in run if qid in qrels]
    skipped = len(run) - len(known)
    if skipped:
        warnings.warn(
            f"{what}: skipped {skipped} run queries with no qrels entry", stacklevel=3
        )
    return known


def _reciprocal_rank(
    ranked: Sequence[tuple[str, float]], relevant: set[str], cutoff: int
) -> float:
    for rank, (docid, _) in enumerate(ranked[:cutoff], start=1):
        if docid in relevant:
            return 1.0 / rank
    return 0.0


def mrr_at(run: Run, qrels: Mapping[str, set[str]], cutoff: int = 10) -> float:
    """Mean reciprocal rank of the first relevant doc within the cutoff;
    queries missing from the qrels are skipped with a warning."""
    if cutoff < 1:
        raise ValueError("cutoff must be at least 1")
    qids = _evaluated_queries(run, qrels, "mrr_at")
    if not qids:
        return 0.0
    total = sum(_reciprocal_rank(run[qid], qrels[qid], cutoff) for qid in qids)
    return total / len(qids)


def recall_at(run: Run, qrels: Mapping[str, set[str]], cutoff: int) -> float:
    """Mean fraction of each query's relevant docs inside the cutoff."""
    if cutoff < 1:
        raise ValueError("cutoff must be at least 1")
    qids = _evaluated_queries(run, qrels, "recall_at")
    if not qids:
        return 0.0
    total = 0.0
    for qid in qids:
        relevant = qrels[qid]
        retrieved = {docid for docid, _ in run[qid][:cutoff]}
        total += len(relevant & retrieved) / len(relevant)
    return total / len(qids)


def _bucket_dots(
    q: BucketedRepresentation, d: BucketedRepresentation
) -> np.ndarray:
    """Per-bucket raw dot products, ignoring the descriptor weights."""
    if not q.same_structure(d):
        raise ValueError("query and document bucket structures differ")
    return np.array([dot(qv, dv) for (_, qv), (_, dv) in zip(q, d)])


@dataclass(frozen=True)
class TuneResult:
    weights: tuple[float, ...]
    mrr: float


def _grid_mrr(
    per_query: list[tuple[np.ndarray, list[str], set[str]]],
    weights: np.ndarray,
    cutoff: int,
) -> float:
    total = 0.0
    for dots, docids, relevant in per_query:
        scores = dots @ weights
        order = sorted(range(len(docids)), key=lambda i: (-scores[i], docids[i]))
        for rank, i in enumerate(order[:cutoff], start=1):
            if docids[i] in relevant:
                total += 1.0 / rank
                break
    return total / len(per_query)


def _prepare_rerank(
    candidates: Mapping[str, Sequence[str]],
    query_reps: Mapping[str, BucketedRepresentation],
    doc_reps: Mapping[str, BucketedRepresentation],
    qrels: Mapping[str, set[str]],
) -> list[tuple[np.ndarray, list[str], set[str]]]:
    per_query = []
    for qid in sorted(candidates):
        if qid not in qrels:
            continue
        docids = sorted(candidates[qid])
        q = query_reps[qid]
        dots = np.stack([_bucket_dots(q, doc_reps[docid]) for docid in docids])
        per_query.append((dots, docids, qrels[qid]))
    if not per_query:
        raise DataError("no candidate query overlaps the qrels")
    return per_query


def tune_bucket_weights(
    candidates: Mapping[str, Sequence[str]],
    query_reps: Mapping[str, BucketedRepresentation],
    doc_reps: Mapping[str, BucketedRepresentation],
    qrels: Mapping[str, set[str]],
    grid: Sequence[Sequence[float]] | None = None,
    cutoff: int = 10,
    max_combinations: int = 10_000_000,
) -> TuneResult:
    """Exhaustive grid search for the bucket weights maximizing MRR.

    Combinations are visited in lexicographic order and only strictly
    better scores replace the incumbent, so ties resolve to the
    lexicographically smallest weight vector.  The all-zero point scores
    nothing and is skipped.
    """
    sample = next(iter(query_reps.values()))
    bucket_count = len(sample.descriptors)
    if grid is None:
        axes = [DEFAULT_WEIGHT_CANDIDATES] * bucket_count
    else:
        if len(grid) != bucket_count:
            raise ValueError(f"grid needs one axis per bucket ({bucket_count})")
        axes = [tuple(sorted(set(float(c) for c in axis))) for axis in grid]
    for axis in axes:
        if not axis:
            raise ValueError("empty grid axis")
        if any(c < 0 for c in axis):
            raise ValueError("grid candidates must be nonnegative")
    if not any(max(axis) > 0 for axis in axes):
        raise ValueError("grid admits no nonzero combination")
    combos = 1
    for axis in axes:
        combos *= len(axis)
    if combos > max_combinations:
        raise ValueError(
            f"grid has {combos} combinations, above the {max_combinations} limit"
        )
    per_query = _prepare_rerank(candidates, query_reps, doc_reps, qrels)
    best: TuneResult | None = None
    for combo in itertools.product(*axes):
        weights = np.array(combo)
        if not weights.any():
            continue
        mrr = _grid_mrr(per_query, weights, cutoff)
        if best is None or mrr > best.mrr:
            best = TuneResult(weights=combo, mrr=mrr)
    return best


def ideal_layer_oracle(
    candidates: Mapping[str, Sequence[str]],
    query_reps: Mapping[str, BucketedRepresentation],
    doc_reps: Mapping[str, BucketedRepresentation],
    qrels: Mapping[str, set[str]],
    cutoff: int = 10,
) -> tuple[float, dict[str, int]]:
    """Upper bound from choosing the best single bucket per query.

    Scores each query's candidates with one bucket's dot product at a
    time and keeps the bucket with the highest reciprocal rank (lowest
    bucket position on ties).  Returns the mean and the per-query choice.
    """
    sample = next(iter(query_reps.values()))
    bucket_count = len(sample.descriptors)
    if bucket_count < 2:
        raise ValueError("the oracle needs at least 2 buckets to choose from")
    per_query = _prepare_rerank(candidates, query_reps, doc_reps, qrels)
    qids = [qid for qid in sorted(candidates) if qid in qrels]
    choices: dict[str, int] = {}
    total = 0.0
    for qid, (dots, docids, relevant) in zip(qids, per_query):
        best_rr, best_bucket = -1.0, 0
        for b in range(bucket_count):
            scores = dots[:, b]
            order = sorted(range(len(docids)), key=lambda i: (-scores[i], docids[i]))
            rr = 0.0
            for rank, i in enumerate(order[:cutoff], start=1):
                if docids[i] in relevant:
                    rr = 1.0 / rank
                    break
            if rr > best_rr:
                best_rr, best_bucket = rr, b
        choices[qid] = best_bucket
        total += best_rr
    return total / len(per_query), choices


def density_profile(
    reps: Iterable[tuple[int, BucketedRepresentation]],
) -> dict[int, float]:
    """Mean density (stored weights over total width) per token length."""
    sums: dict[int, float] = {}
    counts: dict[int, int] = {}
    for length, rep in reps:
        density = rep.total_nnz() / rep.total_dim()
        sums[length] = sums.get(length, 0.0) + density
        counts[length] = counts.get(length, 0) + 1
    return {length: sums[length] / counts[length] for length in sorted(sums)}


def interpret_dimensions(
    queries: Iterable[tuple[Sequence[str], BucketedRepresentation]],
    min_term_count: int = 5,
) -> dict[tuple[int, int], list[tuple[str, int]]]:
    """Which query terms co-occur with each active dimension.

    Keys are (bucket position, dimension).  For every query activating a
    dimension, all of that query's terms are counted; terms reaching
    ``min_term_count`` are listed, most frequent first, ties alphabetic.
    """
    counts: dict[tuple[int, int], dict[str, int]] = {}
    for terms, rep in queries:
        unique_terms = sorted(set(terms))
        for b, (_, vec) in enumerate(rep):
            for dim in vec.dims.tolist():
                per_dim = counts.setdefault((b, int(dim)), {})
                for term in unique_terms:
                    per_dim[term] = per_dim.get(term, 0) + 1
    out: dict[tuple[int, int], list[tuple[str, int]]] = {}
    for key, per_dim in counts.items():
        ranked = sorted(per_dim.items(), key=lambda kv: (-kv[1], kv[0]))
        kept = [(t, c) for t, c in ranked if c >= min_term_count]
        if kept:
            out[key] = kept
    return out
