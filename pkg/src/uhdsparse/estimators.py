"""Scikit-learn style wrappers around the training and retrieval stack.

WtaSparseEncoder is a transformer: fit on (query, positive) text pairs,
transform texts into rows of a scipy CSR matrix whose columns are the
concatenated bucket dimensions.  InvertedIndexRetriever composes a
fitted encoder with the inverted index for end-to-end search.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np
import scipy.sparse
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from uhdsparse.index import InvertedIndex, build_index, search
from uhdsparse.model import SparseModel
from uhdsparse.sparse import BucketedRepresentation
from uhdsparse.training import TrainConfig, TrainingTriple, train

__all__ = ["WtaSparseEncoder", "InvertedIndexRetriever"]


def _as_triples(X: Iterable) -> list[TrainingTriple]:
    triples = []
    for item in X:
        if isinstance(item, TrainingTriple):
            triples.append(item)
        else:
            triples.append(TrainingTriple(*item))
    return triples


class WtaSparseEncoder(BaseEstimator, TransformerMixin):
    """Learn sparse bucketed text representations from training pairs.

    Parameters mirror the training configuration; `infer_k` widens or
    narrows the winner count at transform time without retraining.
    """

    def __init__(
        self,
        h=64,
        n=8192,
        k=16,
        weight_sparsity=0.3,
        layers=(1,),
        mode="single",
        batch_size=8,
        steps=200,
        lr=1e-3,
        warmup_steps=20,
        seed=0,
        aspects=1,
        window=3,
        nonlinearity="tanh",
        vocab_size=30000,
        infer_k=None,
        quantize=True,
    ):
        self.h = h
        self.n = n
        self.k = k
        self.weight_sparsity = weight_sparsity
        self.layers = layers
        self.mode = mode
        self.batch_size = batch_size
        self.steps = steps
        self.lr = lr
        self.warmup_steps = warmup_steps
        self.seed = seed
        self.aspects = aspects
        self.window = window
        self.nonlinearity = nonlinearity
        self.vocab_size = vocab_size
        self.infer_k = infer_k
        self.quantize = quantize

    def fit(self, X, y=None):
        """Train on an iterable of TrainingTriple or (query, positive[,
        negative]) text tuples."""
        config = TrainConfig(
            h=self.h,
            n=self.n,
            k=self.k,
            weight_sparsity=self.weight_sparsity,
            layers=tuple(self.layers),
            mode=self.mode,
            batch_size=self.batch_size,
            steps=self.steps,
            lr=self.lr,
            warmup_steps=self.warmup_steps,
            seed=self.seed,
            aspects=self.aspects,
            window=self.window,
            nonlinearity=self.nonlinearity,
            vocab_size=self.vocab_size,
        )
        self.model_, self.history_ = train(_as_triples(X), config)
        return self

    def _check_fitted(self) -> SparseModel:
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit before encoding")
        return self.model_

    def encode(self, text: str, is_query: bool) -> BucketedRepresentation:
        model = self._check_fitted()
        return model.encode_text(
            text, is_query=is_query, infer_k=self.infer_k, quantize=self.quantize
        )

    def _to_csr(self, texts: Sequence[str], is_query: bool) -> scipy.sparse.csr_matrix:
        model = self._check_fitted()
        widths = [d.bucket_dim for d in (e.descriptor() for e in model.plan)]
        offsets = np.concatenate([[0], np.cumsum(widths)])
        total = int(offsets[-1])
        data, indices, indptr = [], [], [0]
        for text in texts:
            rep = self.encode(text, is_query)
            for b, (_, vec) in enumerate(rep):
                data.append(vec.weights)
                indices.append(vec.dims + offsets[b])
            indptr.append(indptr[-1] + rep.total_nnz())
        if data:
            data = np.concatenate(data)
            indices = np.concatenate(indices)
        return scipy.sparse.csr_matrix(
            (data, indices, indptr), shape=(len(texts), total)
        )

    def transform(self, X) -> scipy.sparse.csr_matrix:
        """Encode texts as documents; one CSR row per text."""
        return self._to_csr(list(X), is_query=False)

    def transform_queries(self, X) -> scipy.sparse.csr_matrix:
        """Encode texts with the query-side token cap."""
        return self._to_csr(list(X), is_query=True)


class InvertedIndexRetriever(BaseEstimator):
    """Index documents through a fitted encoder and rank by relevance."""

    def __init__(
        self,
        encoder: WtaSparseEncoder | None = None,
        top_k: int = 100,
        bucket_weights: Sequence[float] | None = None,
    ):
        self.encoder = encoder
        self.top_k = top_k
        self.bucket_weights = bucket_weights

    def fit(self, X, y=None):
        """Build the index from an iterable of (doc_id, text) pairs."""
        if self.encoder is None:
            raise ValueError("an encoder is required")
        docs = (
            (doc_id, self.encoder.encode(text, is_query=False)) for doc_id, text in X
        )
        self.index_ = build_index(docs)
        return self

    def _check_fitted(self) -> InvertedIndex:
        if not hasattr(self, "index_"):
            raise NotFittedError("call fit before searching")
        return self.index_

    def _query_rep(self, text: str) -> BucketedRepresentation:
        rep = self.encoder.encode(text, is_query=True)
        if self.bucket_weights is not None:
            rep = rep.with_weights(self.bucket_weights)
        return rep

    def search(self, text: str, top_k: int | None = None) -> list[tuple[str, float]]:
        index = self._check_fitted()
        return search(index, self._query_rep(text), top_k or self.top_k)

    def predict(self, X) -> np.ndarray:
        """Top-ranked doc id per query text; empty string if none match."""
        self._check_fitted()
        out = []
        for text in X:
            hits = self.search(text, top_k=1)
            out.append(hits[0][0] if hits else "")
        return np.asarray(out, dtype=object)
