"""Seeded generator for a separable topical corpus.

Twenty topics with disjoint content vocabularies, shared filler words,
and retrieval queries drawn purely from one topic's vocabulary. Every
document of the query's topic is relevant and nothing else is, so a
working model can reach very high MRR while a broken one cannot.

A separate family of probe queries mixes words from several topics at
graded lengths. Retrieval queries stay on-topic, so after training
their tokens land on one shared support regardless of count; the probes
keep per-token content distinct, which is what a density-versus-length
measurement needs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from uhdsparse.training import TrainingTriple

__all__ = ["SyntheticCorpus", "separable_corpus"]

_FILLERS = (
    "the a an of in on at to for with from by about into over after under "
    "again then once here there all any both each few more most other some "
    "such no nor not only own same so than too very just"
).split()

_CONSONANTS = "bcdfglmnprstvz"
_VOWELS = "aeiou"


def _topic_vocab(topic: int, words_per_topic: int) -> list[str]:
    """Pronounceable nonsense words, disjoint across topics by suffix."""
    words = []
    for w in range(words_per_topic):
        c1 = _CONSONANTS[(topic * 3 + w) % len(_CONSONANTS)]
        v1 = _VOWELS[(topic + w) % len(_VOWELS)]
        c2 = _CONSONANTS[(topic + w * 5) % len(_CONSONANTS)]
        v2 = _VOWELS[(topic * 2 + w * 3) % len(_VOWELS)]
        words.append(f"{c1}{v1}{c2}{v2}t{topic}w{w}")
    return words


@dataclass(frozen=True)
class SyntheticCorpus:
    """Everything the retrieval pipeline consumes, as plain text."""

    docs: tuple[tuple[str, str], ...]
    train_queries: tuple[tuple[str, str], ...]
    heldout_queries: tuple[tuple[str, str], ...]
    qrels: dict[str, set[str]]
    triples: tuple[TrainingTriple, ...]
    density_probes: tuple[tuple[str, str], ...]
    topic_of_doc: dict[str, int]
    topic_of_query: dict[str, int]


def separable_corpus(
    seed: int = 0,
    doc_count: int = 500,
    topic_count: int = 20,
    train_query_count: int = 200,
    heldout_query_count: int = 50,
    words_per_topic: int = 12,
    triples_per_query: int = 4,
    max_query_len: int = 8,
    probe_count: int = 200,
) -> SyntheticCorpus:
    if doc_count % topic_count:
        raise ValueError("doc_count must divide evenly across topics")
    if max_query_len > min(words_per_topic, topic_count):
        raise ValueError("query length exceeds vocabulary or topic count")
    rng = np.random.default_rng(seed)
    vocabs = [_topic_vocab(t, words_per_topic) for t in range(topic_count)]
    per_topic = doc_count // topic_count

    docs = []
    topic_docs: list[list[str]] = [[] for _ in range(topic_count)]
    topic_of_doc = {}
    for i in range(doc_count):
        topic = i % topic_count
        doc_id = f"d{i:04d}"
        length = int(rng.integers(20, 41))
        content = int(round(length * 0.6))
        words = [vocabs[topic][int(j)] for j in rng.integers(0, words_per_topic, content)]
        words += [_FILLERS[int(j)] for j in rng.integers(0, len(_FILLERS), length - content)]
        rng.shuffle(words)
        docs.append((doc_id, " ".join(words)))
        topic_docs[topic].append(doc_id)
        topic_of_doc[doc_id] = topic
    doc_text = dict(docs)

    def make_queries(prefix: str, count: int):
        queries = []
        topics = {}
        for i in range(count):
            topic = i % topic_count
            qid = f"{prefix}{i:04d}"
            length = i % max_query_len + 1
            picks = rng.choice(words_per_topic, size=length, replace=False)
            queries.append((qid, " ".join(vocabs[topic][int(j)] for j in picks)))
            topics[qid] = topic
        return queries, topics

    train_queries, train_topics = make_queries("qt", train_query_count)
    heldout_queries, heldout_topics = make_queries("qh", heldout_query_count)

    qrels = {
        qid: set(topic_docs[topic])
        for qid, topic in {**train_topics, **heldout_topics}.items()
    }

    # Cycle positives through each topic's documents so the whole corpus
    # vocabulary is visible at training time.
    cursor = [0] * topic_count
    triples = []
    for qid, qtext in train_queries:
        topic = train_topics[qid]
        for _ in range(triples_per_query):
            pos_id = topic_docs[topic][cursor[topic] % per_topic]
            cursor[topic] += 1
            other = (topic + 1 + int(rng.integers(0, topic_count - 1))) % topic_count
            neg_id = topic_docs[other][int(rng.integers(0, per_topic))]
            triples.append(TrainingTriple(qtext, doc_text[pos_id], doc_text[neg_id]))

    # Probes draw from a fresh stream so the retrieval fixtures above are
    # unaffected by how many probes a caller asks for.
    probe_rng = np.random.default_rng(seed + 104729)
    probes = []
    for i in range(probe_count):
        length = i % max_query_len + 1
        tops = probe_rng.choice(topic_count, size=length, replace=False)
        words = [
            vocabs[int(t)][int(probe_rng.integers(0, words_per_topic))] for t in tops
        ]
        probes.append((f"p{i:04d}", " ".join(words)))

    return SyntheticCorpus(
        docs=tuple(docs),
        train_queries=tuple(train_queries),
        heldout_queries=tuple(heldout_queries),
        qrels=qrels,
        triples=tuple(triples),
        density_probes=tuple(probes),
        topic_of_doc=topic_of_doc,
        topic_of_query={**train_topics, **heldout_topics},
    )
