"""Joint training of the toy encoder and WTA layers.

The loss is a pairwise hinge over in-batch negatives: within a batch of
(query, positive) pairs, every other query's positive serves as a
negative, giving B(B-1) terms max(0, 1 - rel_pos + rel_neg).

All gradients are written by hand.  The backward path retraces the
recorded forward exactly: hinge -> relevance -> L2 normalization (exact
Jacobian) -> max-pool (gradient routed to the argmax token, lowest token
index on ties) -> WTA (winner columns only, masked weights pinned at
zero) -> mixing layers -> embedding rows.  A finite-difference audit
over small instances keeps the whole chain honest.

Training never quantizes representations: buckets stay double precision
end to end so derivative checks see a smooth function.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from uhdsparse.encoder import NONLINEARITIES, ToyEncoder
from uhdsparse.errors import DataError, TrainingDivergedError
from uhdsparse.model import SparseModel
from uhdsparse.sparse import (
    BucketedRepresentation,
    SparseVector,
    max_pool_recorded,
)
from uhdsparse.tokenizer import build_vocabulary, tokenize
from uhdsparse.wta import (
    PLAN_MODES,
    BucketPlan,
    WtaForwardState,
    WtaLayer,
    accumulate_wta_backward,
    relevance,
    top_k_indices,
)

__all__ = [
    "TrainingTriple",
    "TrainConfig",
    "BatchLossReport",
    "AdamW",
    "hinge_loss",
    "batch_loss",
    "load_triples",
    "train",
    "finite_difference_audit",
]


@dataclass(frozen=True)
class TrainingTriple:
    query: str
    positive: str
    negative: str = ""

    def __post_init__(self):
        if not self.query.strip() or not self.positive.strip():
            raise DataError("query and positive passage must be nonempty")


def load_triples(path: str | os.PathLike) -> list[TrainingTriple]:
    """Read `query TAB positive TAB negative` lines; errors carry line numbers."""
    triples = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(
                    f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}"
                )
            try:
                triples.append(TrainingTriple(*parts))
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    return triples


_REQUIRED_KEYS = (
    "h",
    "n",
    "k",
    "weight_sparsity",
    "layers",
    "mode",
    "batch_size",
    "steps",
    "lr",
    "warmup_steps",
    "seed",
)


@dataclass(frozen=True)
class TrainConfig:
    h: int
    n: int
    k: int
    weight_sparsity: float
    layers: tuple[int, ...]
    mode: str
    batch_size: int
    steps: int
    lr: float
    warmup_steps: int
    seed: int
    aspects: int = 1
    window: int = 3
    nonlinearity: str = "tanh"
    mixing_noise: float = 0.02
    vocab_size: int = 30000
    weight_decay: float = 0.01
    explicit_negatives: bool = False

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(int(j) for j in self.layers))
        if self.mode not in PLAN_MODES:
            raise ValueError(f"mode must be one of {PLAN_MODES}, got {self.mode!r}")
        if self.batch_size < 2:
            raise ValueError("in-batch negatives require batch size >= 2")
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")
        if not (1 <= self.k <= self.n):
            raise ValueError(f"k must be in [1, {self.n}]")
        if self.h < 1:
            raise ValueError("h must be positive")
        if not self.layers or any(j < 1 for j in self.layers):
            raise ValueError("layers must be nonempty 1-based indices")
        if self.mode in ("single", "horizontal") and len(self.layers) != 1:
            raise ValueError(f"{self.mode} mode takes exactly one source layer")
        if self.aspects < 1:
            raise ValueError("aspects must be positive")
        if self.nonlinearity not in NONLINEARITIES:
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be nonnegative")

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        missing = [key for key in _REQUIRED_KEYS if key not in raw]
        if missing:
            raise ValueError(f"missing config key {missing[0]!r}")
        return cls(**raw)

    def build_plan(self, rng: np.random.Generator) -> BucketPlan:
        if self.mode == "vertical":
            return BucketPlan.vertical(
                self.layers, self.h, self.n, self.k,
                weight_sparsity=self.weight_sparsity, rng=rng,
            )
        if self.mode == "horizontal":
            return BucketPlan.horizontal(
                self.layers[0], self.aspects, self.h, self.n, self.k,
                weight_sparsity=self.weight_sparsity, rng=rng,
            )
        wta = WtaLayer.create(
            self.h, self.n, self.k, weight_sparsity=self.weight_sparsity, rng=rng
        )
        return BucketPlan.single(wta, source_layer=self.layers[0])

    @property
    def encoder_depth(self) -> int:
        return max(self.layers)


@dataclass(frozen=True)
class BatchLossReport:
    step: int
    mean_loss: float
    active_pairs: int
    mean_pos: float
    mean_neg: float


def hinge_loss(rel_pos: float, rel_neg: float) -> float:
    """Pairwise margin loss max(0, 1 - rel_pos + rel_neg)."""
    return max(0.0, 1.0 - rel_pos + rel_neg)


def _score_matrix(
    queries: Sequence[BucketedRepresentation],
    positives: Sequence[BucketedRepresentation],
) -> np.ndarray:
    b = len(queries)
    s = np.empty((b, b), dtype=np.float64)
    for i, q in enumerate(queries):
        for j, d in enumerate(positives):
            s[i, j] = relevance(q, d)
    return s


def _hinge_terms(s: np.ndarray, step: int = 0) -> tuple[BatchLossReport, np.ndarray]:
    """Mean hinge over the B(B-1) in-batch pairs plus its gradient on s.

    A pair contributes gradient only when its margin is strictly
    positive, so the kink at exactly zero backpropagates nothing.
    """
    b = s.shape[0]
    diag = np.diag(s).copy()
    margins = 1.0 - diag[:, None] + s
    off = ~np.eye(b, dtype=bool)
    active = off & (margins > 0.0)
    pairs = b * (b - 1)
    report = BatchLossReport(
        step=step,
        mean_loss=float(margins[active].sum() / pairs),
        active_pairs=int(active.sum()),
        mean_pos=float(diag.mean()),
        mean_neg=float(s[off].mean()),
    )
    grad_s = active.astype(np.float64) / pairs
    np.fill_diagonal(grad_s, -active.sum(axis=1) / pairs)
    return report, grad_s


def batch_loss(
    queries: Sequence[BucketedRepresentation],
    positives: Sequence[BucketedRepresentation],
) -> BatchLossReport:
    """Score every query against every in-batch positive and report the
    mean hinge over the B(B-1) cross pairs."""
    if len(queries) != len(positives):
        raise ValueError("queries and positives must align")
    if len(queries) < 2:
        raise ValueError("in-batch negatives require at least 2 pairs")
    report, _ = _hinge_terms(_score_matrix(queries, positives))
    return report


def _merge_explicit_negatives(
    report: BatchLossReport, grad_s: np.ndarray, s: np.ndarray, neg_scores: np.ndarray
) -> tuple[BatchLossReport, np.ndarray, np.ndarray]:
    """Fold each triple's own negative into the mean as B extra pairs."""
    b = s.shape[0]
    pairs = b * (b - 1)
    total_pairs = pairs + b
    margins = 1.0 - np.diag(s) + neg_scores
    active = margins > 0.0
    total = report.mean_loss * pairs + float(margins[active].sum())
    grad_s = grad_s * (pairs / total_pairs)
    extra = active.astype(np.float64) / total_pairs
    idx = np.arange(b)
    grad_s[idx, idx] -= extra
    merged = BatchLossReport(
        step=report.step,
        mean_loss=total / total_pairs,
        active_pairs=report.active_pairs + int(active.sum()),
        mean_pos=report.mean_pos,
        mean_neg=report.mean_neg,
    )
    return merged, grad_s, extra


class AdamW:
    """Adam with decoupled weight decay and a warmup/decay schedule.

    The learning rate ramps linearly over ``warmup_steps``, then decays
    linearly toward zero at ``total_steps`` (constant if no total given).
    """

    def __init__(
        self,
        params: Sequence[tuple[str, np.ndarray]],
        lr: float,
        warmup_steps: int = 0,
        total_steps: int | None = None,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        self.params = list(params)
        names = [name for name, _ in self.params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self.base_lr = float(lr)
        self.warmup_steps = int(warmup_steps)
        self.total_steps = total_steps
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self.m = {name: np.zeros_like(p) for name, p in self.params}
        self.v = {name: np.zeros_like(p) for name, p in self.params}

    def learning_rate(self, step: int) -> float:
        """Schedule value at a 1-based step number."""
        if self.warmup_steps > 0 and step <= self.warmup_steps:
            return self.base_lr * step / self.warmup_steps
        if self.total_steps is None or self.total_steps <= self.warmup_steps:
            return self.base_lr
        span = self.total_steps - self.warmup_steps
        return self.base_lr * max(0.0, (self.total_steps - step) / span)

    def apply(self, grads: dict[str, np.ndarray]) -> float:
        """One in-place update; returns the learning rate used."""
        self.step_count += 1
        t = self.step_count
        lr_t = self.learning_rate(t)
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self.params:
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p -= lr_t * ((m / bc1) / (np.sqrt(v / bc2) + self.eps))
            if self.weight_decay:
                p -= lr_t * self.weight_decay * p
        return lr_t


def model_param_items(
    encoder: ToyEncoder, plan: BucketPlan
) -> list[tuple[str, np.ndarray]]:
    items = [(f"encoder.{name}", arr) for name, arr in encoder.param_items()]
    for i, entry in enumerate(plan):
        for name, arr in entry.wta.param_items():
            items.append((f"bucket{i}.{name}", arr))
    return items


@dataclass
class TextForward:
    """Recorded forward pass of one text through encoder and buckets."""

    enc_states: dict
    token_states: list[list[WtaForwardState]]
    buckets: list[SparseVector]
    norms: list[float]
    pool_winners: list[np.ndarray]
    rep: BucketedRepresentation


def encode_text_recorded(
    ids: Sequence[int], encoder: ToyEncoder, plan: BucketPlan
) -> TextForward:
    """Training-path encoding: train_k, double precision, all state kept."""
    enc_states = encoder.forward_states(ids)
    token_states, buckets, norms, winners_all = [], [], [], []
    for entry in plan:
        dense = enc_states["out"][entry.layer_index - 1]
        wta = entry.wta
        n = wta.output_size
        z = dense @ wta.w + wta.b
        states, vecs = [], []
        for t in range(z.shape[0]):
            sel = top_k_indices(z[t], wta.train_k)
            vals = z[t][sel]
            keep = vals != 0.0
            out = SparseVector(n, sel[keep], vals[keep])
            vecs.append(out)
            states.append(WtaForwardState(layer=wta, e=dense[t], output=out))
        pooled, winners = max_pool_recorded(vecs)
        norm = pooled.norm()
        if pooled.nnz:
            bucket = SparseVector(n, pooled.dims, pooled.weights / norm)
        else:
            bucket = pooled
        token_states.append(states)
        buckets.append(bucket)
        norms.append(norm)
        winners_all.append(winners)
    rep = BucketedRepresentation(
        tuple((entry.descriptor(), vec) for entry, vec in zip(plan, buckets))
    )
    return TextForward(
        enc_states=enc_states,
        token_states=token_states,
        buckets=buckets,
        norms=norms,
        pool_winners=winners_all,
        rep=rep,
    )


def _backward_text(
    tf: TextForward,
    bucket_grads: list[np.ndarray],
    plan: BucketPlan,
    encoder: ToyEncoder,
    grads: dict[str, np.ndarray],
) -> None:
    """Push dense per-bucket gradients down to every parameter."""
    grads_out: list[np.ndarray | None] = [None] * encoder.depth
    for b_idx, entry in enumerate(plan):
        bucket = tf.buckets[b_idx]
        if bucket.nnz == 0:
            continue
        dims = bucket.dims
        y = bucket.weights
        g_s = bucket_grads[b_idx][dims]
        # Exact Jacobian of x / |x| restricted to the recorded support.
        gx = (g_s - y * (y @ g_s)) / tf.norms[b_idx]
        winners = tf.pool_winners[b_idx]
        slot = entry.layer_index - 1
        if grads_out[slot] is None:
            grads_out[slot] = np.zeros_like(tf.enc_states["out"][slot])
        g_layer = grads_out[slot]
        grad_w = grads[f"bucket{b_idx}.W"]
        grad_b = grads[f"bucket{b_idx}.b"]
        for t, state in enumerate(tf.token_states[b_idx]):
            routed = winners == t
            if not routed.any():
                continue
            vals = gx[routed]
            nz = vals != 0.0
            if not nz.any():
                continue
            upstream = SparseVector(bucket.n, dims[routed][nz], vals[nz])
            accumulate_wta_backward(state, upstream, grad_w, grad_b, g_layer[t])
    enc_grads = encoder.backward(tf.enc_states, grads_out)
    for name, g in enc_grads.items():
        grads[f"encoder.{name}"] += g


def _pair_backward(
    sources: Sequence[TextForward],
    coeffs: np.ndarray,
    targets: Sequence[TextForward],
    plan: BucketPlan,
    encoder: ToyEncoder,
    grads: dict[str, np.ndarray],
) -> None:
    """For each target t accumulate sum_s coeffs[s, t] * sources[s].buckets
    (scaled by bucket weights) as the dense gradient on t, then backprop."""
    sizes = [entry.wta.output_size for entry in plan]
    weights = [entry.weight for entry in plan]
    for t_idx, tf in enumerate(targets):
        bucket_grads = [np.zeros(size) for size in sizes]
        touched = False
        for s_idx, sf in enumerate(sources):
            g = coeffs[s_idx, t_idx]
            if g == 0.0:
                continue
            for b, (w_b, vec) in enumerate(zip(weights, sf.buckets)):
                if w_b == 0.0 or vec.nnz == 0:
                    continue
                bucket_grads[b][vec.dims] += (g * w_b) * vec.weights
                touched = True
        if touched:
            _backward_text(tf, bucket_grads, plan, encoder, grads)


def _batch_backward(
    q_fwd: Sequence[TextForward],
    d_fwd: Sequence[TextForward],
    grad_s: np.ndarray,
    plan: BucketPlan,
    encoder: ToyEncoder,
    grads: dict[str, np.ndarray],
) -> None:
    # d rel(q_i, d_j) / d(q_i buckets) involves d_j's buckets and vice versa.
    _pair_backward(d_fwd, grad_s.T, q_fwd, plan, encoder, grads)
    _pair_backward(q_fwd, grad_s, d_fwd, plan, encoder, grads)


def train(
    triples: Sequence[TrainingTriple],
    config: TrainConfig,
    loss_log_path: str | os.PathLike | None = None,
) -> tuple[SparseModel, list[BatchLossReport]]:
    """Run the full loop; returns the trained model and per-step reports.

    Deterministic for a fixed config: vocabulary, initialization, batch
    order and every update derive from ``config.seed`` alone.
    """
    if not triples:
        raise DataError("no training triples")
    rng = np.random.default_rng(config.seed)
    corpus_texts = [t.query for t in triples] + [t.positive for t in triples]
    corpus_texts += [t.negative for t in triples if t.negative.strip()]
    tokenizer = build_vocabulary(corpus_texts, max_size=config.vocab_size)
    encoder = ToyEncoder.create(
        tokenizer.vocab_size,
        config.h,
        depth=config.encoder_depth,
        window=config.window,
        nonlinearity=config.nonlinearity,
        mixing_noise=config.mixing_noise,
        rng=rng,
    )
    plan = config.build_plan(rng)
    model = SparseModel(plan=plan, encoder=encoder, tokenizer=tokenizer)

    q_ids = [tokenize(t.query, tokenizer, is_query=True) for t in triples]
    d_ids = [tokenize(t.positive, tokenizer, is_query=False) for t in triples]
    n_ids = None
    if config.explicit_negatives:
        for idx, t in enumerate(triples):
            if not t.negative.strip():
                raise DataError(
                    f"triple {idx}: explicit negatives enabled but negative is empty"
                )
        n_ids = [tokenize(t.negative, tokenizer, is_query=False) for t in triples]

    params = model_param_items(encoder, plan)
    opt = AdamW(
        params,
        lr=config.lr,
        warmup_steps=config.warmup_steps,
        total_steps=config.steps,
        weight_decay=config.weight_decay,
    )

    history: list[BatchLossReport] = []
    log_file = open(loss_log_path, "w", newline="") if loss_log_path else None
    writer = None
    if log_file:
        writer = csv.writer(log_file)
        writer.writerow(["step", "mean_loss", "mean_pos", "mean_neg"])
    try:
        step = 0
        order = np.arange(len(triples))
        while step < config.steps:
            rng.shuffle(order)
            for start in range(0, len(order), config.batch_size):
                if step >= config.steps:
                    break
                batch = order[start : start + config.batch_size]
                if batch.size < 2:
                    break
                step += 1
                q_fwd = [encode_text_recorded(q_ids[i], encoder, plan) for i in batch]
                d_fwd = [encode_text_recorded(d_ids[i], encoder, plan) for i in batch]
                s = _score_matrix([f.rep for f in q_fwd], [f.rep for f in d_fwd])
                if not np.isfinite(s).all():
                    raise TrainingDivergedError(step, float(np.abs(s).max()))
                report, grad_s = _hinge_terms(s, step)
                neg_fwd = grad_neg = None
                if config.explicit_negatives:
                    neg_fwd = [
                        encode_text_recorded(n_ids[i], encoder, plan) for i in batch
                    ]
                    neg_scores = np.array(
                        [relevance(qf.rep, nf.rep) for qf, nf in zip(q_fwd, neg_fwd)]
                    )
                    report, grad_s, grad_neg = _merge_explicit_negatives(
                        report, grad_s, s, neg_scores
                    )
                if not np.isfinite(report.mean_loss):
                    raise TrainingDivergedError(step, report.mean_loss)
                history.append(report)
                if writer:
                    writer.writerow(
                        [
                            report.step,
                            f"{report.mean_loss:.6f}",
                            f"{report.mean_pos:.6f}",
                            f"{report.mean_neg:.6f}",
                        ]
                    )
                grads = {name: np.zeros_like(p) for name, p in params}
                _batch_backward(q_fwd, d_fwd, grad_s, plan, encoder, grads)
                if neg_fwd is not None:
                    # One query/negative pair per triple, coefficient on the
                    # diagonal; both sides of each dot receive gradient.
                    diag = np.diag(grad_neg)
                    _pair_backward(neg_fwd, diag, q_fwd, plan, encoder, grads)
                    _pair_backward(q_fwd, diag, neg_fwd, plan, encoder, grads)
                opt.apply(grads)
                for entry in plan:
                    entry.wta.apply_mask()
                # Once parameters overflow, later forwards can degenerate
                # to empty buckets whose scores look innocently finite, so
                # divergence must be caught here rather than at the loss.
                for name, p in params:
                    if not np.isfinite(p).all():
                        raise TrainingDivergedError(step, float(np.abs(p).max()))
    finally:
        if log_file:
            log_file.close()
    return model, history


def _instance_well_conditioned(
    fwd: Sequence[TextForward], s: np.ndarray, plan: BucketPlan, margin: float
) -> bool:
    """True when no decision boundary sits within ``margin`` of flipping.

    Checks winner-set gaps and zero-exclusion at every token, pooling
    argmax gaps (including the clip against the implicit zero), bucket
    norms, and the distance of every hinge term from its kink.
    """
    b = s.shape[0]
    margins = 1.0 - np.diag(s)[:, None] + s
    off = ~np.eye(b, dtype=bool)
    if np.abs(margins[off]).min() < margin:
        return False
    if not (margins[off] > 0.0).any():
        return False
    for tf in fwd:
        for b_idx, entry in enumerate(plan):
            if tf.norms[b_idx] < 1e-3:
                return False
            dense = tf.enc_states["out"][entry.layer_index - 1]
            z = dense @ entry.wta.w + entry.wta.b
            k = entry.wta.train_k
            for t in range(z.shape[0]):
                ordered = np.sort(z[t])[::-1]
                if ordered.size > k and ordered[k - 1] - ordered[k] < margin:
                    return False
                if np.abs(ordered[:k]).min() < margin:
                    return False
            vecs = [state.output for state in tf.token_states[b_idx]]
            per_dim: dict[int, list[float]] = {}
            for vec in vecs:
                for d, w in zip(vec.dims.tolist(), vec.weights.tolist()):
                    per_dim.setdefault(d, []).append(w)
            for values in per_dim.values():
                values = sorted(values, reverse=True)
                runner = values[1] if len(values) > 1 else -np.inf
                if len(values) < len(vecs):
                    runner = max(runner, 0.0)
                if values[0] - runner < margin:
                    return False
    return True


def finite_difference_audit(
    seed: int = 0,
    h: int = 6,
    n: int = 24,
    max_tokens: int = 4,
    bucket_count: int = 2,
    fd_step: float = 1e-4,
) -> float:
    """Compare every analytic parameter gradient of the batch loss
    against central differences on one small random instance.

    Instances whose decision boundaries (winner sets, pool routing,
    hinge kinks) sit within 10x the step, or whose included gradients
    are small enough for truncation noise to dominate the ratio, are
    redrawn from the next derived seed.  Returns the worst relative
    error over parameters with |gradient| > 1e-8.
    """
    margin = 10.0 * fd_step
    for attempt in range(50):
        rng = np.random.default_rng(seed * 1000 + attempt)
        vocab = 12
        encoder = ToyEncoder.create(
            vocab, h, depth=bucket_count, window=3, mixing_noise=0.1, rng=rng
        )
        plan = BucketPlan.vertical(
            range(1, bucket_count + 1), h, n,
            train_k=3, weight_sparsity=0.3, rng=rng,
        )
        texts = [
            rng.integers(0, vocab, size=rng.integers(1, max_tokens + 1)).tolist()
            for _ in range(4)
        ]
        q_ids, d_ids = texts[:2], texts[2:]

        def forward():
            q_fwd = [encode_text_recorded(ids, encoder, plan) for ids in q_ids]
            d_fwd = [encode_text_recorded(ids, encoder, plan) for ids in d_ids]
            s = _score_matrix([f.rep for f in q_fwd], [f.rep for f in d_fwd])
            return q_fwd, d_fwd, s

        q_fwd, d_fwd, s = forward()
        if not _instance_well_conditioned(q_fwd + d_fwd, s, plan, margin):
            continue
        _, grad_s = _hinge_terms(s)
        params = model_param_items(encoder, plan)
        grads = {name: np.zeros_like(p) for name, p in params}
        _batch_backward(q_fwd, d_fwd, grad_s, plan, encoder, grads)

        free_masks = {f"bucket{i}.W": entry.wta.mask for i, entry in enumerate(plan)}
        smallest = np.inf
        for name, _ in params:
            g = np.abs(grads[name])
            mask = free_masks.get(name)
            live = g > 1e-8 if mask is None else (g > 1e-8) & (mask > 0)
            if live.any():
                smallest = min(smallest, float(g[live].min()))
        if smallest < 1e-5:
            # fd truncation error would swamp the ratio on these.
            continue

        def loss_value():
            _, _, s_now = forward()
            report, _ = _hinge_terms(s_now)
            return report.mean_loss

        worst = 0.0
        for name, p in params:
            mask = free_masks.get(name)
            flat = p.reshape(-1)
            g_flat = grads[name].reshape(-1)
            m_flat = mask.reshape(-1) if mask is not None else None
            for idx in range(flat.size):
                if m_flat is not None and m_flat[idx] == 0.0:
                    continue
                a = g_flat[idx]
                if abs(a) <= 1e-8:
                    continue
                orig = flat[idx]
                flat[idx] = orig + fd_step
                up = loss_value()
                flat[idx] = orig - fd_step
                down = loss_value()
                flat[idx] = orig
                fd = (up - down) / (2.0 * fd_step)
                rel = abs(a - fd) / max(abs(a), abs(fd))
                worst = max(worst, rel)
        return worst
    raise RuntimeError("no well-conditioned audit instance found")
