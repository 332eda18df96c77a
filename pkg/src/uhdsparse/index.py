"""Per-bucket inverted index: build, exact search, and persistence.

Every nonzero (bucket, dimension, weight) of every document becomes one
posting.  Search is term-at-a-time: for each query dimension the posting
list is walked once, accumulating w_b * q_weight * d_weight into a
per-document double-precision accumulator.  No pruning, no
approximation: results match brute-force scoring of the whole corpus,
which is what the tests hold it to.

The on-disk format is a single little-endian file holding the doc table
and each bucket's postings back to back, closed by a CRC-64 (XZ
polynomial) over everything before it.
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from uhdsparse.errors import CorruptFileError, DataError, FormatError
from uhdsparse.sparse import BucketDescriptor, BucketedRepresentation

__all__ = [
    "InvertedIndex",
    "BucketStats",
    "build_index",
    "search",
    "write_index",
    "read_index",
    "index_stats",
    "crc64_xz",
]

UHDI_MAGIC = b"UHDI"
UHDI_VERSION = 1

_CRC64_POLY_REFLECTED = 0xC96C5795D7870F42
_CRC64_MASK = 0xFFFFFFFFFFFFFFFF


def _make_crc64_table() -> list[int]:
    table = []
    for i in range(256):
        crc = i
        for _ in range(8):
            crc = (crc >> 1) ^ (_CRC64_POLY_REFLECTED if crc & 1 else 0)
        table.append(crc)
    return table


_CRC64_TABLE = _make_crc64_table()


def crc64_xz(data: bytes, crc: int = 0) -> int:
    """CRC-64 with the XZ polynomial (reflected, init/xorout all-ones)."""
    crc = (crc ^ _CRC64_MASK) & _CRC64_MASK
    table = _CRC64_TABLE
    for b in data:
        crc = table[(crc ^ b) & 0xFF] ^ (crc >> 8)
    return crc ^ _CRC64_MASK


_POSTING_DTYPE = np.dtype([("ordinal", "<u4"), ("weight", "<f4")])


class _BucketIndex:
    """Postings of one bucket: dimension -> (ordinals, weights)."""

    def __init__(self, descriptor: BucketDescriptor):
        self.descriptor = descriptor
        self.postings: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    @property
    def postings_count(self) -> int:
        return sum(o.size for o, _ in self.postings.values())


class InvertedIndex:
    """Immutable-after-build index over one corpus."""

    def __init__(self, buckets: Sequence[_BucketIndex], doc_ids: Sequence[str]):
        self.buckets = list(buckets)
        self.doc_ids = list(doc_ids)

    @property
    def doc_count(self) -> int:
        return len(self.doc_ids)

    @property
    def descriptors(self) -> list[BucketDescriptor]:
        return [b.descriptor for b in self.buckets]

    @property
    def postings_count(self) -> int:
        return sum(b.postings_count for b in self.buckets)

    def _structure_matches(self, rep: BucketedRepresentation) -> bool:
        if len(rep) != len(self.buckets):
            return False
        return all(
            rd.key() == b.descriptor.key() and rd.bucket_dim == b.descriptor.bucket_dim
            for rd, b in zip(rep.descriptors, self.buckets)
        )


def build_index(
    docs: Iterable[tuple[str, BucketedRepresentation]]
) -> InvertedIndex:
    """Turn a document stream into per-bucket posting lists.

    Documents arrive as (external id, representation); ordinals follow
    arrival order.  All representations must share one bucket structure.
    """
    doc_ids: list[str] = []
    seen: set[str] = set()
    structure: BucketedRepresentation | None = None
    staging: list[dict[int, list[tuple[int, float]]]] = []
    descriptors: list[BucketDescriptor] = []

    for doc_id, rep in docs:
        if doc_id in seen:
            raise DataError(f"duplicate document id {doc_id!r}")
        if structure is None:
            structure = rep
            descriptors = rep.descriptors
            staging = [{} for _ in rep.descriptors]
        elif not structure.same_structure(rep):
            raise DataError(
                f"document {doc_id!r} bucket structure differs from the corpus"
            )
        ordinal = len(doc_ids)
        seen.add(doc_id)
        doc_ids.append(doc_id)
        for lists, vec in zip(staging, rep.vectors):
            for d, w in zip(vec.dims.tolist(), vec.weights.tolist()):
                lists.setdefault(d, []).append((ordinal, w))

    buckets = []
    for desc, lists in zip(descriptors, staging):
        bucket = _BucketIndex(desc)
        for d, entries in lists.items():
            ordinals = np.array([o for o, _ in entries], dtype=np.int64)
            weights = np.array([w for _, w in entries], dtype=np.float64)
            bucket.postings[d] = (ordinals, weights)
        buckets.append(bucket)
    if structure is None:
        return InvertedIndex([], [])
    return InvertedIndex(buckets, doc_ids)


def search(
    index: InvertedIndex, q: BucketedRepresentation, top_k: int
) -> list[tuple[str, float]]:
    """Exact top-``top_k`` documents for one query.

    Scores sort descending; ties break by ascending document ordinal.
    Documents sharing no dimension with the query are never touched, so
    they can never appear, even with top_k above the match count.
    """
    if top_k <= 0:
        raise ValueError(f"top_k must be positive, got {top_k}")
    if not index._structure_matches(q):
        raise ValueError("query bucket structure does not match the index")
    acc = np.zeros(index.doc_count, dtype=np.float64)
    touched = np.zeros(index.doc_count, dtype=bool)
    for (q_desc, q_vec), bucket in zip(q, index.buckets):
        w_b = q_desc.weight
        if w_b == 0.0:
            continue
        postings = bucket.postings
        for d, q_w in zip(q_vec.dims.tolist(), q_vec.weights.tolist()):
            entry = postings.get(d)
            if entry is None:
                continue
            ordinals, weights = entry
            acc[ordinals] += (w_b * q_w) * weights
            touched[ordinals] = True
    candidates = np.flatnonzero(touched)
    if candidates.size == 0:
        return []
    scores = acc[candidates]
    order = np.lexsort((candidates, -scores))[:top_k]
    return [(index.doc_ids[candidates[i]], float(scores[i])) for i in order]


def write_index(index: InvertedIndex, path: str | os.PathLike) -> int:
    """Serialize; returns bytes written including the trailing checksum."""
    buf = io.BytesIO()
    buf.write(UHDI_MAGIC)
    buf.write(struct.pack("<II", UHDI_VERSION, len(index.buckets)))
    buf.write(struct.pack("<I", index.doc_count))
    for doc_id in index.doc_ids:
        raw = doc_id.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
    for bucket in index.buckets:
        desc = bucket.descriptor
        buf.write(
            struct.pack(
                "<IIIf",
                desc.layer_index,
                desc.aspect_index,
                desc.bucket_dim,
                desc.weight,
            )
        )
        buf.write(struct.pack("<I", len(bucket.postings)))
        for d in sorted(bucket.postings):
            ordinals, weights = bucket.postings[d]
            buf.write(struct.pack("<II", d, ordinals.size))
            interleaved = np.empty(ordinals.size, dtype=_POSTING_DTYPE)
            interleaved["ordinal"] = ordinals
            interleaved["weight"] = weights
            buf.write(interleaved.tobytes())
    payload = buf.getvalue()
    checksum = crc64_xz(payload)
    with open(path, "wb") as f:
        f.write(payload)
        f.write(struct.pack("<Q", checksum))
    return len(payload) + 8


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptFileError("index payload ends mid-record")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f32(self) -> float:
        return struct.unpack("<f", self.take(4))[0]


def read_index(path: str | os.PathLike) -> InvertedIndex:
    """Load and fully validate an index file.

    The trailing checksum is verified before any structure is parsed, so
    a truncated or bit-flipped file never yields a partial index.
    """
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != UHDI_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {UHDI_MAGIC!r}")
    if len(data) < 12 + 8:
        raise CorruptFileError("file too short for header and checksum")
    payload, tail = data[:-8], data[-8:]
    (stored,) = struct.unpack("<Q", tail)
    actual = crc64_xz(payload)
    if stored != actual:
        raise CorruptFileError(
            f"checksum mismatch: stored {stored:#018x}, computed {actual:#018x}"
        )
    cur = _Cursor(payload)
    cur.take(4)
    version = cur.u32()
    if version != UHDI_VERSION:
        raise FormatError(f"unsupported index version {version}")
    bucket_count = cur.u32()
    doc_count = cur.u32()
    doc_ids = []
    for _ in range(doc_count):
        doc_ids.append(cur.take(cur.u32()).decode("utf-8"))
    buckets = []
    for _ in range(bucket_count):
        j, m, n = cur.u32(), cur.u32(), cur.u32()
        w_b = cur.f32()
        bucket = _BucketIndex(BucketDescriptor(j, m, n, w_b))
        dim_count = cur.u32()
        for _ in range(dim_count):
            d = cur.u32()
            length = cur.u32()
            raw = np.frombuffer(cur.take(length * 8), dtype=_POSTING_DTYPE)
            ordinals = raw["ordinal"].astype(np.int64)
            if np.any(ordinals >= doc_count):
                raise CorruptFileError("posting ordinal beyond doc table")
            bucket.postings[d] = (ordinals, raw["weight"].astype(np.float64))
        buckets.append(bucket)
    if cur.pos != len(payload):
        raise CorruptFileError("trailing bytes after last bucket")
    return InvertedIndex(buckets, doc_ids)


@dataclass(frozen=True)
class BucketStats:
    """Exact occupancy accounting for one bucket of an index."""

    descriptor: BucketDescriptor
    postings_count: int
    active_dims: int
    mean_posting_length: float
    activation_frequency: dict[int, int]
    doc_nnz: np.ndarray
    density_histogram: tuple[np.ndarray, np.ndarray]


def index_stats(index: InvertedIndex) -> list[BucketStats]:
    """Per-bucket posting counts, activation frequencies and densities."""
    stats = []
    for bucket in index.buckets:
        freq = {d: o.size for d, (o, _) in sorted(bucket.postings.items())}
        total = sum(freq.values())
        doc_nnz = np.zeros(index.doc_count, dtype=np.int64)
        for ordinals, _ in bucket.postings.values():
            np.add.at(doc_nnz, ordinals, 1)
        n = bucket.descriptor.bucket_dim
        densities = doc_nnz / n
        upper = max(float(densities.max()) if densities.size else 0.0, 1.0 / n)
        hist, edges = np.histogram(densities, bins=16, range=(0.0, upper))
        stats.append(
            BucketStats(
                descriptor=bucket.descriptor,
                postings_count=total,
                active_dims=len(freq),
                mean_posting_length=total / len(freq) if freq else 0.0,
                activation_frequency=freq,
                doc_nnz=doc_nnz,
                density_histogram=(hist, edges),
            )
        )
    return stats
