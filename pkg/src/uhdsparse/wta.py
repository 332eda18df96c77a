"""Winner-take-all sparsification and bucketed representations.

A :class:`WtaLayer` projects an h-dimensional token embedding into an
n-dimensional space (n >> h) and keeps only the k largest activations.
A fixed random binary mask severs a fraction of each output dimension's
input connections at initialization and for the life of the layer.

A :class:`BucketPlan` arranges one or more WTA layers over encoder
layers: vertically (one bucket per encoder layer), horizontally (several
independently initialized WTA layers over one encoder layer), or a
single bucket.  Per text, each plan entry yields one bucket: the
per-token sparse vectors are max-pooled and L2-normalized.  Relevance
between two bucketed representations is the weighted sum of bucket-wise
dot products, with weights taken from the query side so that reweighting
never requires touching an index.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from uhdsparse.encoder import DenseTokenMatrix
from uhdsparse.errors import NoForwardStateError
from uhdsparse.sparse import (
    BucketDescriptor,
    BucketedRepresentation,
    SparseVector,
    dot,
    l2_normalize,
    max_pool,
)

__all__ = [
    "WtaLayer",
    "WtaForwardState",
    "PlanEntry",
    "BucketPlan",
    "wta_forward",
    "wta_forward_batch",
    "wta_forward_recorded",
    "wta_backward",
    "build_bucket",
    "encode_representation",
    "relevance",
]

PLAN_MODES = ("vertical", "horizontal", "single")


def top_k_indices(z: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest values of z, ties to the lower index.

    Every index whose value strictly exceeds the k-th largest is
    selected; remaining slots are filled from the indices tied at the
    k-th value in ascending order.  Result is sorted ascending.
    """
    if k >= z.size:
        return np.arange(z.size)
    part = np.argpartition(-z, k - 1)[:k]
    kth = z[part].min()
    above = np.flatnonzero(z > kth)
    ties = np.flatnonzero(z == kth)
    sel = np.concatenate([above, ties[: k - above.size]])
    sel.sort()
    return sel


class WtaLayer:
    """Trainable masked projection with top-k selection.

    ``w`` is kept masked at all times: entries severed by the mask are
    exactly zero from initialization through every update.
    """

    def __init__(
        self,
        w: np.ndarray,
        b: np.ndarray,
        mask: np.ndarray,
        train_k: int,
        infer_k: int | None = None,
        weight_sparsity: float = 0.3,
    ):
        self.w = np.ascontiguousarray(w, dtype=np.float64)
        self.b = np.ascontiguousarray(b, dtype=np.float64)
        self.mask = np.ascontiguousarray(mask, dtype=np.float64)
        if self.w.ndim != 2:
            raise ValueError("W must be h x n")
        h, n = self.w.shape
        if self.b.shape != (n,) or self.mask.shape != (h, n):
            raise ValueError("b and mask shapes must match W")
        if not np.isin(self.mask, (0.0, 1.0)).all():
            raise ValueError("mask must be binary")
        if not (1 <= train_k <= n):
            raise ValueError(f"train_k must be in [1, {n}], got {train_k}")
        infer_k = train_k if infer_k is None else infer_k
        if not (1 <= infer_k <= n):
            raise ValueError(f"infer_k must be in [1, {n}], got {infer_k}")
        if not (0.0 <= weight_sparsity < 1.0):
            raise ValueError("weight_sparsity must be in [0, 1)")
        self.w *= self.mask
        self.train_k = int(train_k)
        self.infer_k = int(infer_k)
        self.weight_sparsity = float(weight_sparsity)

    @classmethod
    def create(
        cls,
        input_size: int,
        output_size: int,
        train_k: int,
        infer_k: int | None = None,
        weight_sparsity: float = 0.3,
        rng: np.random.Generator | None = None,
    ) -> "WtaLayer":
        """Fan-in uniform init for W, zero bias, then a per-output mask
        severing ceil(weight_sparsity * h) of each output's h inputs."""
        rng = rng or np.random.default_rng()
        h, n = input_size, output_size
        bound = 1.0 / np.sqrt(h)
        w = rng.uniform(-bound, bound, (h, n))
        severed = int(np.ceil(weight_sparsity * h))
        mask = np.ones((h, n))
        if severed:
            ranks = rng.random((h, n)).argsort(axis=0)
            mask[ranks < severed] = 0.0
        return cls(w, np.zeros(n), mask, train_k, infer_k, weight_sparsity)

    @property
    def input_size(self) -> int:
        return int(self.w.shape[0])

    @property
    def output_size(self) -> int:
        return int(self.w.shape[1])

    def apply_mask(self) -> None:
        """Re-zero severed entries; call after in-place weight updates."""
        self.w *= self.mask

    def param_items(self) -> list[tuple[str, np.ndarray]]:
        return [("W", self.w), ("b", self.b)]


@dataclass(frozen=True)
class WtaForwardState:
    """Everything the backward pass needs from one recorded forward."""

    layer: WtaLayer
    e: np.ndarray
    output: SparseVector


def _activations(e: np.ndarray, layer: WtaLayer) -> np.ndarray:
    e = np.asarray(e, dtype=np.float64)
    if e.shape != (layer.input_size,):
        raise ValueError(
            f"input length {e.shape} does not match h={layer.input_size}"
        )
    return e @ layer.w + layer.b


def _select_top_k(z: np.ndarray, k: int, n: int) -> SparseVector:
    sel = top_k_indices(z, k)
    vals = z[sel]
    keep = vals != 0.0
    return SparseVector(n, sel[keep], vals[keep])


def wta_forward(e: np.ndarray, layer: WtaLayer, k: int) -> SparseVector:
    """Dense activations z = e.W + b, then the k signed-largest entries.

    Entries whose activation is exactly 0.0 are dropped, so nnz <= k.
    """
    if not (1 <= k <= layer.output_size):
        raise ValueError(f"k must be in [1, {layer.output_size}], got {k}")
    z = _activations(e, layer)
    return _select_top_k(z, k, layer.output_size)


def wta_forward_batch(
    matrix: np.ndarray, layer: WtaLayer, k: int
) -> list[SparseVector]:
    """Row-wise :func:`wta_forward` sharing one matrix product."""
    if not (1 <= k <= layer.output_size):
        raise ValueError(f"k must be in [1, {layer.output_size}], got {k}")
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[1] != layer.input_size:
        raise ValueError(
            f"expected (tokens, {layer.input_size}) matrix, got {matrix.shape}"
        )
    z = matrix @ layer.w + layer.b
    return [_select_top_k(z[t], k, layer.output_size) for t in range(z.shape[0])]


def wta_forward_recorded(
    e: np.ndarray, layer: WtaLayer, k: int
) -> tuple[SparseVector, WtaForwardState]:
    """Forward pass that records its winner set for the backward pass.

    Recording rather than recomputing makes backward immune to
    floating-point ties shifting the winner set between passes.
    """
    out = wta_forward(e, layer, k)
    return out, WtaForwardState(layer=layer, e=np.asarray(e, dtype=np.float64), output=out)


def wta_backward(
    state: WtaForwardState | None, upstream: SparseVector
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (grad_e, grad_W, grad_b) for one recorded forward.

    The upstream gradient must be supported on the recorded winner set;
    loser columns and masked weights come back exactly zero.
    """
    if state is None:
        raise NoForwardStateError("wta_backward called without a recorded forward")
    layer = state.layer
    grad_w = np.zeros_like(layer.w)
    grad_b = np.zeros_like(layer.b)
    grad_e = np.zeros_like(state.e)
    accumulate_wta_backward(state, upstream, grad_w, grad_b, grad_e)
    return grad_e, grad_w, grad_b


def accumulate_wta_backward(
    state: WtaForwardState,
    upstream: SparseVector,
    grad_w: np.ndarray,
    grad_b: np.ndarray,
    grad_e: np.ndarray,
) -> None:
    """In-place version of :func:`wta_backward` for tight training loops."""
    if upstream.nnz == 0:
        return
    winners = state.output.dims
    if not np.isin(upstream.dims, winners).all():
        raise ValueError("upstream gradient outside the recorded winner set")
    cols = upstream.dims
    vals = upstream.weights
    layer = state.layer
    # z_d = e . W[:, d] + b_d on winner columns only.
    grad_b[cols] += vals
    grad_w[:, cols] += np.outer(state.e, vals) * layer.mask[:, cols]
    grad_e += layer.w[:, cols] @ vals


@dataclass(frozen=True)
class PlanEntry:
    """One bucket source: encoder layer j, aspect m, and its WTA layer."""

    layer_index: int
    aspect_index: int
    wta: WtaLayer
    weight: float = 1.0

    def __post_init__(self):
        if self.layer_index < 1 or self.aspect_index < 1:
            raise ValueError("layer and aspect indices start at 1")
        if not (self.weight >= 0.0):
            raise ValueError("bucket weight must be nonnegative")

    def descriptor(self) -> BucketDescriptor:
        return BucketDescriptor(
            self.layer_index, self.aspect_index, self.wta.output_size, self.weight
        )


@dataclass(frozen=True)
class BucketPlan:
    """Ordered bucket sources plus the arrangement mode tag."""

    entries: tuple[PlanEntry, ...]
    mode: str

    def __post_init__(self):
        entries = tuple(self.entries)
        if not entries:
            raise ValueError("plan must have at least one entry")
        if self.mode not in PLAN_MODES:
            raise ValueError(f"mode must be one of {PLAN_MODES}, got {self.mode!r}")
        keys = [(e.layer_index, e.aspect_index) for e in entries]
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate (layer, aspect) pair in plan")
        if self.mode == "vertical":
            js = [e.layer_index for e in entries]
            if len(set(js)) != len(js) or any(e.aspect_index != 1 for e in entries):
                raise ValueError("vertical mode needs distinct layers, aspect 1")
        elif self.mode == "horizontal":
            if len({e.layer_index for e in entries}) != 1:
                raise ValueError("horizontal mode needs a single source layer")
            ms = [e.aspect_index for e in entries]
            if len(set(ms)) != len(ms):
                raise ValueError("horizontal mode needs distinct aspects")
        elif len(entries) != 1:
            raise ValueError("single mode has exactly one entry")
        object.__setattr__(self, "entries", entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @classmethod
    def single(cls, wta: WtaLayer, source_layer: int = 1) -> "BucketPlan":
        return cls((PlanEntry(source_layer, 1, wta),), "single")

    @classmethod
    def vertical(
        cls,
        layer_indices: Sequence[int],
        input_size: int,
        output_size: int,
        train_k: int,
        infer_k: int | None = None,
        weight_sparsity: float = 0.3,
        rng: np.random.Generator | None = None,
    ) -> "BucketPlan":
        rng = rng or np.random.default_rng()
        entries = tuple(
            PlanEntry(
                j,
                1,
                WtaLayer.create(
                    input_size, output_size, train_k, infer_k, weight_sparsity, rng
                ),
            )
            for j in layer_indices
        )
        return cls(entries, "vertical")

    @classmethod
    def horizontal(
        cls,
        source_layer: int,
        aspect_count: int,
        input_size: int,
        output_size: int,
        train_k: int,
        infer_k: int | None = None,
        weight_sparsity: float = 0.3,
        rng: np.random.Generator | None = None,
    ) -> "BucketPlan":
        rng = rng or np.random.default_rng()
        entries = tuple(
            PlanEntry(
                source_layer,
                m,
                WtaLayer.create(
                    input_size, output_size, train_k, infer_k, weight_sparsity, rng
                ),
            )
            for m in range(1, aspect_count + 1)
        )
        return cls(entries, "horizontal")

    def with_weights(self, weights: Sequence[float]) -> "BucketPlan":
        if len(weights) != len(self.entries):
            raise ValueError(f"expected {len(self.entries)} weights")
        entries = tuple(
            PlanEntry(e.layer_index, e.aspect_index, e.wta, float(w))
            for e, w in zip(self.entries, weights)
        )
        return BucketPlan(entries, self.mode)


def _find_layer(layers_dense: Sequence[DenseTokenMatrix], j: int) -> DenseTokenMatrix:
    for m in layers_dense:
        if m.layer_index == j:
            return m
    available = sorted(m.layer_index for m in layers_dense)
    raise ValueError(f"source layer {j} not among encoded layers {available}")


def build_bucket(
    layers_dense: Sequence[DenseTokenMatrix],
    plan_entry: PlanEntry,
    infer_k: int | None = None,
    quantize: bool = True,
) -> SparseVector:
    """One bucket for one text: per-token WTA, max-pool, L2-normalize.

    ``quantize`` rounds the final weights to single precision, the same
    values any index or checkpoint would carry, so in-memory scoring and
    on-disk scoring agree exactly.
    """
    dense = _find_layer(layers_dense, plan_entry.layer_index)
    k = plan_entry.wta.infer_k if infer_k is None else infer_k
    tokens = wta_forward_batch(dense.values, plan_entry.wta, k)
    bucket = l2_normalize(max_pool(tokens))
    return bucket.quantized() if quantize else bucket


def encode_representation(
    layers_dense: Sequence[DenseTokenMatrix],
    plan: BucketPlan,
    infer_k: int | None = None,
    quantize: bool = True,
) -> BucketedRepresentation:
    """One bucket per plan entry, in plan order."""
    return BucketedRepresentation(
        tuple(
            (entry.descriptor(), build_bucket(layers_dense, entry, infer_k, quantize))
            for entry in plan
        )
    )


def relevance(q: BucketedRepresentation, d: BucketedRepresentation) -> float:
    """Weighted sum of bucket-wise dot products, weights from the query."""
    if not q.same_structure(d):
        raise ValueError("query and document bucket structures differ")
    total = 0.0
    for (q_desc, q_vec), (_, d_vec) in zip(q, d):
        if q_desc.weight == 0.0:
            continue
        total += q_desc.weight * dot(q_vec, d_vec)
    return total
