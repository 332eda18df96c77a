"""Exact sparse-vector arithmetic and aggregation primitives.

A :class:`SparseVector` is the currency of the whole system: queries,
documents and posting payloads are all sorted (dimension, weight) pairs in
an n-dimensional space.  Zeros are represented by absence, never stored.

Weights live in float64 arrays while in memory; every accumulation (dot
products, norms) is performed in double precision.  Persistence layers
round to single precision at their own boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "SparseVector",
    "BucketDescriptor",
    "BucketedRepresentation",
    "dot",
    "max_pool",
    "l2_normalize",
    "truncate_top_k",
]


@dataclass(frozen=True)
class SparseVector:
    """Sorted sparse vector in an ``n``-dimensional space.

    Invariants: dims strictly ascending, all ``< n``, and no stored weight
    is exactly ``0.0``.
    """

    n: int
    dims: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        if self.n <= 0:
            raise ValueError(f"dimensionality must be positive, got {self.n}")
        dims = np.ascontiguousarray(self.dims, dtype=np.int32)
        weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        if dims.shape != weights.shape or dims.ndim != 1:
            raise ValueError("dims and weights must be 1-d arrays of equal length")
        if dims.size:
            if dims[0] < 0 or dims[-1] >= self.n:
                raise ValueError("dimension index out of range")
            if np.any(np.diff(dims) <= 0):
                raise ValueError("dimensions must be strictly ascending")
            if np.any(weights == 0.0):
                raise ValueError("exact-zero weights must not be stored")
        dims.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def empty(cls, n: int) -> "SparseVector":
        return cls(n, np.empty(0, dtype=np.int32), np.empty(0, dtype=np.float64))

    @classmethod
    def from_dict(cls, n: int, entries: Mapping[int, float]) -> "SparseVector":
        """Build from a {dim: weight} mapping, dropping exact zeros."""
        items = sorted((d, w) for d, w in entries.items() if w != 0.0)
        dims = np.array([d for d, _ in items], dtype=np.int32)
        weights = np.array([w for _, w in items], dtype=np.float64)
        return cls(n, dims, weights)

    @classmethod
    def from_dense(cls, values: np.ndarray) -> "SparseVector":
        values = np.asarray(values, dtype=np.float64)
        dims = np.flatnonzero(values != 0.0).astype(np.int32)
        return cls(values.shape[0], dims, values[dims])

    def to_dict(self) -> dict[int, float]:
        return {int(d): float(w) for d, w in zip(self.dims, self.weights)}

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.n, dtype=np.float64)
        out[self.dims] = self.weights
        return out

    @property
    def nnz(self) -> int:
        return int(self.dims.size)

    def norm(self) -> float:
        """Euclidean norm, accumulated in double precision."""
        return float(np.sqrt(np.dot(self.weights, self.weights)))

    def quantized(self) -> "SparseVector":
        """Round weights to the nearest single-precision value.

        Used by the encoding pipeline so that in-memory representations,
        serialized postings and checkpoints all score identically.
        """
        w = self.weights.astype(np.float32).astype(np.float64)
        keep = w != 0.0
        if keep.all():
            return SparseVector(self.n, self.dims, w)
        return SparseVector(self.n, self.dims[keep], w[keep])

    def __eq__(self, other) -> bool:
        if not isinstance(other, SparseVector):
            return NotImplemented
        return (
            self.n == other.n
            and np.array_equal(self.dims, other.dims)
            and np.array_equal(self.weights, other.weights)
        )


@dataclass(frozen=True)
class BucketDescriptor:
    """Identifies one bucket: source layer ``j``, aspect ``m``, its
    dimensionality and a nonnegative scoring weight."""

    layer_index: int
    aspect_index: int
    bucket_dim: int
    weight: float = 1.0

    def __post_init__(self):
        if self.layer_index < 1 or self.aspect_index < 1:
            raise ValueError("layer and aspect indices start at 1")
        if self.bucket_dim <= 0:
            raise ValueError("bucket_dim must be positive")
        if not (self.weight >= 0.0):
            raise ValueError("bucket weight must be nonnegative")

    def key(self) -> tuple[int, int]:
        return (self.layer_index, self.aspect_index)


@dataclass(frozen=True)
class BucketedRepresentation:
    """Ordered list of (descriptor, sparse vector) buckets for one text."""

    buckets: tuple[tuple[BucketDescriptor, SparseVector], ...]

    def __post_init__(self):
        buckets = tuple(self.buckets)
        keys = [d.key() for d, _ in buckets]
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate (layer, aspect) pair in representation")
        for desc, vec in buckets:
            if vec.n != desc.bucket_dim:
                raise ValueError(
                    f"bucket {desc.key()} vector has n={vec.n}, "
                    f"descriptor says {desc.bucket_dim}"
                )
        object.__setattr__(self, "buckets", buckets)

    def __len__(self) -> int:
        return len(self.buckets)

    def __iter__(self):
        return iter(self.buckets)

    @property
    def descriptors(self) -> list[BucketDescriptor]:
        return [d for d, _ in self.buckets]

    @property
    def vectors(self) -> list[SparseVector]:
        return [v for _, v in self.buckets]

    def total_nnz(self) -> int:
        return sum(v.nnz for v in self.vectors)

    def total_dim(self) -> int:
        return sum(d.bucket_dim for d in self.descriptors)

    def same_structure(self, other: "BucketedRepresentation") -> bool:
        """Structural equality: same (j, m, n) sequence, weights ignored."""
        if len(self) != len(other):
            return False
        return all(
            a.key() == b.key() and a.bucket_dim == b.bucket_dim
            for a, b in zip(self.descriptors, other.descriptors)
        )

    def with_weights(self, weights: Sequence[float]) -> "BucketedRepresentation":
        """Copy with the descriptor weights replaced, bucket by bucket."""
        if len(weights) != len(self):
            raise ValueError(
                f"expected {len(self)} weights, got {len(weights)}"
            )
        buckets = tuple(
            (
                BucketDescriptor(d.layer_index, d.aspect_index, d.bucket_dim, float(w)),
                v,
            )
            for (d, v), w in zip(self.buckets, weights)
        )
        return BucketedRepresentation(buckets)


def dot(a: SparseVector, b: SparseVector) -> float:
    """Dot product over the shared support, accumulated in float64.

    Disjoint supports score exactly 0.0.
    """
    if a.n != b.n:
        raise ValueError(f"dimensionality mismatch: {a.n} vs {b.n}")
    if a.nnz == 0 or b.nnz == 0:
        return 0.0
    if a.nnz > b.nnz:
        a, b = b, a
    pos = np.searchsorted(b.dims, a.dims)
    pos_c = np.minimum(pos, b.nnz - 1)
    hit = b.dims[pos_c] == a.dims
    if not hit.any():
        return 0.0
    return float(np.dot(a.weights[hit], b.weights[pos_c[hit]]))


def max_pool(vectors: Sequence[SparseVector]) -> SparseVector:
    """Elementwise maximum across vectors, zeros implied by absence.

    A dimension missing from any input contributes 0.0 to that
    dimension's maximum, so a negative value survives only when every
    input carries that dimension.  Resulting exact zeros are dropped.
    """
    if len(vectors) == 0:
        raise ValueError("max_pool requires at least one vector")
    n = vectors[0].n
    for v in vectors[1:]:
        if v.n != n:
            raise ValueError("all vectors must share one dimensionality")
    if len(vectors) == 1:
        return vectors[0]
    pooled, _ = max_pool_recorded(vectors)
    return pooled


def max_pool_recorded(
    vectors: Sequence[SparseVector],
) -> tuple[SparseVector, np.ndarray]:
    """As :func:`max_pool`, also returning the winning input index per
    surviving entry (lowest index on ties) for gradient routing."""
    n = vectors[0].n
    n_inputs = len(vectors)
    all_dims = np.concatenate([v.dims for v in vectors])
    if all_dims.size == 0:
        return SparseVector.empty(n), np.empty(0, dtype=np.int64)
    all_w = np.concatenate([v.weights for v in vectors])
    src = np.concatenate(
        [np.full(v.nnz, i, dtype=np.int64) for i, v in enumerate(vectors)]
    )
    # dims ascending, then weight descending, then source index ascending:
    # the first row of each dim group is its winner under the tie rule.
    order = np.lexsort((src, -all_w, all_dims))
    d_sorted = all_dims[order]
    uniq, first, counts = np.unique(d_sorted, return_index=True, return_counts=True)
    w = all_w[order][first]
    winner = src[order][first]
    if n_inputs > 1:
        # A dim absent from some input competes against an implicit zero.
        partial = counts < n_inputs
        w = np.where(partial, np.maximum(w, 0.0), w)
    keep = w != 0.0
    return SparseVector(n, uniq[keep], w[keep]), winner[keep]


def l2_normalize(v: SparseVector) -> SparseVector:
    """Scale to unit Euclidean norm; the empty vector is returned as is."""
    if v.nnz == 0:
        return v
    return SparseVector(v.n, v.dims, v.weights / v.norm())


def truncate_top_k(v: SparseVector, k_prime: int) -> SparseVector:
    """Keep the ``k_prime`` largest-weight entries (ties to lower dim)."""
    if k_prime <= 0:
        raise ValueError(f"k_prime must be positive, got {k_prime}")
    if v.nnz <= k_prime:
        return v
    # Primary key weight descending, secondary key dim ascending.
    order = np.lexsort((v.dims, -v.weights))[:k_prime]
    keep = np.sort(v.dims[order])
    pos = np.searchsorted(v.dims, keep)
    return SparseVector(v.n, keep, v.weights[pos])
