"""Per-layer dense token embeddings.

Two sources produce the same shape of data: a small trainable contextual
encoder built here, and binary embedding files exported from a real
pretrained encoder.  Either way the consumer sees one dense |t| x h
matrix per layer.

The toy encoder is an embedding lookup followed by ``depth`` mixing
layers.  Each mixing layer averages every token with its neighbours in a
fixed odd-width window, applies an h x h projection plus bias, and a
pointwise nonlinearity.  The window mean is what makes outputs
context-dependent without any attention machinery, and every piece has a
closed-form gradient.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Iterator, Sequence

import numpy as np
from scipy.special import erf

from uhdsparse.errors import CorruptFileError, DataError, FormatError

__all__ = [
    "DenseTokenMatrix",
    "MixingLayer",
    "ToyEncoder",
    "encode_layers",
    "read_embedding_file",
    "write_embedding_file",
]

UHDE_MAGIC = b"UHDE"
UHDE_VERSION = 1

NONLINEARITIES = ("tanh", "gelu", "identity")

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class DenseTokenMatrix:
    """Dense embeddings of one text at one encoder layer."""

    layer_index: int
    values: np.ndarray

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise ValueError(f"expected a nonempty 2-d matrix, got shape {values.shape}")
        if not np.isfinite(values).all():
            raise DataError(f"nonfinite embedding values at layer {self.layer_index}")
        if self.layer_index < 1:
            raise ValueError("layer_index starts at 1")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def token_count(self) -> int:
        return int(self.values.shape[0])

    @property
    def hidden_size(self) -> int:
        return int(self.values.shape[1])


def apply_nonlinearity(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "gelu":
        return 0.5 * z * (1.0 + erf(z / _SQRT2))
    if name == "identity":
        return z
    raise ValueError(f"unknown nonlinearity {name!r}")


def nonlinearity_grad(name: str, z: np.ndarray) -> np.ndarray:
    """Derivative of the nonlinearity with respect to its input."""
    if name == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    if name == "gelu":
        cdf = 0.5 * (1.0 + erf(z / _SQRT2))
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * z * z)
        return cdf + z * pdf
    if name == "identity":
        return np.ones_like(z)
    raise ValueError(f"unknown nonlinearity {name!r}")


def window_average_matrix(token_count: int, window: int) -> np.ndarray:
    """Linear operator for the sliding window mean over token positions.

    Row i averages positions i-r .. i+r clipped to the sequence, each row
    normalized by the number of in-bounds positions it covers.
    """
    r = (window - 1) // 2
    a = np.zeros((token_count, token_count), dtype=np.float64)
    for i in range(token_count):
        lo, hi = max(0, i - r), min(token_count, i + r + 1)
        a[i, lo:hi] = 1.0 / (hi - lo)
    return a


class MixingLayer:
    """One h x h projection with bias, applied after window averaging."""

    def __init__(self, w: np.ndarray, b: np.ndarray):
        self.w = np.ascontiguousarray(w, dtype=np.float64)
        self.b = np.ascontiguousarray(b, dtype=np.float64)
        h = self.w.shape[0]
        if self.w.shape != (h, h) or self.b.shape != (h,):
            raise ValueError("mixing layer expects square W and matching bias")


class ToyEncoder:
    """Trainable stand-in for a pretrained multi-layer encoder.

    Mixing weights start near the identity so early layer outputs stay
    close to the raw embeddings and deeper layers remain informative
    before any training has happened.
    """

    def __init__(
        self,
        embedding: np.ndarray,
        layers: Sequence[MixingLayer],
        window: int = 3,
        nonlinearity: str = "tanh",
    ):
        if window < 1 or window % 2 == 0:
            raise ValueError("window must be a positive odd width")
        if nonlinearity not in NONLINEARITIES:
            raise ValueError(f"unknown nonlinearity {nonlinearity!r}")
        if not layers:
            raise ValueError("at least one mixing layer required")
        self.embedding = np.ascontiguousarray(embedding, dtype=np.float64)
        if self.embedding.ndim != 2:
            raise ValueError("embedding table must be 2-d")
        h = self.embedding.shape[1]
        for layer in layers:
            if layer.w.shape != (h, h):
                raise ValueError("all mixing layers must match the hidden size")
        self.layers = list(layers)
        self.window = int(window)
        self.nonlinearity = nonlinearity

    @classmethod
    def create(
        cls,
        vocab_size: int,
        hidden_size: int,
        depth: int = 6,
        window: int = 3,
        nonlinearity: str = "tanh",
        mixing_noise: float = 0.02,
        rng: np.random.Generator | None = None,
    ) -> "ToyEncoder":
        rng = rng or np.random.default_rng()
        embedding = rng.normal(0.0, 1.0 / np.sqrt(hidden_size), (vocab_size, hidden_size))
        layers = []
        for _ in range(depth):
            w = np.eye(hidden_size) + mixing_noise * rng.normal(
                0.0, 1.0, (hidden_size, hidden_size)
            )
            layers.append(MixingLayer(w, np.zeros(hidden_size)))
        return cls(embedding, layers, window=window, nonlinearity=nonlinearity)

    @property
    def vocab_size(self) -> int:
        return int(self.embedding.shape[0])

    @property
    def hidden_size(self) -> int:
        return int(self.embedding.shape[1])

    @property
    def depth(self) -> int:
        return len(self.layers)

    def param_items(self) -> list[tuple[str, np.ndarray]]:
        """Named parameter arrays, mutated in place by the optimizer."""
        items = [("embedding", self.embedding)]
        for j, layer in enumerate(self.layers, start=1):
            items.append((f"mix{j}.W", layer.w))
            items.append((f"mix{j}.b", layer.b))
        return items

    def forward_states(self, token_ids: Sequence[int]) -> dict:
        """Run the full stack, keeping every intermediate for backward.

        Returns arrays keyed: ``x0`` (embedding rows), per layer lists
        ``averaged``, ``pre`` (projection output) and ``out``
        (post-nonlinearity), plus the shared window operator ``avg_op``.
        """
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.size == 0:
            raise ValueError("token_ids must be nonempty")
        if ids.min() < 0 or ids.max() >= self.vocab_size:
            raise ValueError(
                f"token id out of range [0, {self.vocab_size}): "
                f"{int(ids.min())}..{int(ids.max())}"
            )
        x = self.embedding[ids]
        avg_op = window_average_matrix(ids.size, self.window)
        states = {"ids": ids, "x0": x, "avg_op": avg_op, "averaged": [], "pre": [], "out": []}
        for layer in self.layers:
            averaged = avg_op @ x
            pre = averaged @ layer.w + layer.b
            x = apply_nonlinearity(self.nonlinearity, pre)
            states["averaged"].append(averaged)
            states["pre"].append(pre)
            states["out"].append(x)
        return states

    def backward(
        self, states: dict, grads_out: Sequence[np.ndarray | None]
    ) -> dict[str, np.ndarray]:
        """Backpropagate per-layer output gradients to all parameters.

        ``grads_out[j]`` is the gradient on layer j+1's output, or None
        when that layer received none.  Returns gradients keyed like
        :meth:`param_items`, including ``embedding`` restricted to the
        rows that appeared (dense table, zero elsewhere).
        """
        if len(grads_out) != self.depth:
            raise ValueError("one output gradient slot per layer required")
        avg_op_t = states["avg_op"].T
        grads = {
            f"mix{j}.W": np.zeros_like(layer.w)
            for j, layer in enumerate(self.layers, start=1)
        }
        for j, layer in enumerate(self.layers, start=1):
            grads[f"mix{j}.b"] = np.zeros_like(layer.b)
        grad_x = None
        for j in range(self.depth - 1, -1, -1):
            g = grads_out[j]
            if grad_x is not None and g is not None:
                g = g + grad_x
            elif grad_x is not None:
                g = grad_x
            if g is None:
                grad_x = None
                continue
            layer = self.layers[j]
            g_pre = g * nonlinearity_grad(self.nonlinearity, states["pre"][j])
            grads[f"mix{j + 1}.W"] += states["averaged"][j].T @ g_pre
            grads[f"mix{j + 1}.b"] += g_pre.sum(axis=0)
            grad_x = avg_op_t @ (g_pre @ layer.w.T)
        grad_embedding = np.zeros_like(self.embedding)
        if grad_x is not None:
            np.add.at(grad_embedding, states["ids"], grad_x)
        grads["embedding"] = grad_embedding
        return grads


def encode_layers(token_ids: Sequence[int], enc: ToyEncoder) -> list[DenseTokenMatrix]:
    """All layer outputs for one token sequence, as 1-based layers."""
    states = enc.forward_states(token_ids)
    return [
        DenseTokenMatrix(layer_index=j, values=out)
        for j, out in enumerate(states["out"], start=1)
    ]


def _read_exact(f: BinaryIO, nbytes: int, context: str) -> bytes:
    data = f.read(nbytes)
    if len(data) != nbytes:
        raise CorruptFileError(f"truncated file while reading {context}")
    return data


def write_embedding_file(
    path: str | os.PathLike,
    records: Iterable[tuple[str, Sequence[np.ndarray]]],
    layer_count: int,
    hidden_size: int,
) -> int:
    """Write per-layer token embeddings; returns the record count.

    Each record is (text id, one |t| x h matrix per layer).  Values are
    stored single-precision, little-endian, layer-major.
    """
    if layer_count < 1 or hidden_size < 1:
        raise ValueError("layer_count and hidden_size must be positive")
    count = 0
    with open(path, "wb") as f:
        f.write(UHDE_MAGIC)
        f.write(struct.pack("<III", UHDE_VERSION, layer_count, hidden_size))
        for text_id, matrices in records:
            mats = [
                m.values if isinstance(m, DenseTokenMatrix) else np.asarray(m)
                for m in matrices
            ]
            if len(mats) != layer_count:
                raise DataError(
                    f"record {text_id!r} has {len(mats)} layers, header says {layer_count}"
                )
            tc = mats[0].shape[0]
            for m in mats:
                if m.ndim != 2 or m.shape != (tc, hidden_size):
                    raise DataError(
                        f"record {text_id!r} layer shape {m.shape} does not match "
                        f"({tc}, {hidden_size})"
                    )
                if not np.isfinite(m).all():
                    raise DataError(f"record {text_id!r} contains nonfinite values")
            if tc < 1:
                raise DataError(f"record {text_id!r} has no tokens")
            id_bytes = text_id.encode("utf-8")
            f.write(struct.pack("<I", len(id_bytes)))
            f.write(id_bytes)
            f.write(struct.pack("<I", tc))
            for m in mats:
                f.write(np.ascontiguousarray(m, dtype="<f4").tobytes())
            count += 1
    return count


def read_embedding_file(
    path: str | os.PathLike,
) -> Iterator[tuple[str, list[DenseTokenMatrix]]]:
    """Stream (text id, per-layer matrices) records from an embedding file.

    Layers are numbered 1..V in file order.  Header problems raise
    :class:`FormatError`, short reads :class:`CorruptFileError`, and
    nonfinite payloads :class:`DataError`.
    """
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != UHDE_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {UHDE_MAGIC!r}")
        version, layer_count, hidden_size = struct.unpack(
            "<III", _read_exact(f, 12, "header")
        )
        if version != UHDE_VERSION:
            raise FormatError(f"unsupported embedding file version {version}")
        if layer_count < 1 or hidden_size < 1:
            raise FormatError("header declares empty layer count or hidden size")
        file_size = os.fstat(f.fileno()).st_size
        while True:
            head = f.read(4)
            if len(head) == 0:
                return
            if len(head) != 4:
                raise CorruptFileError("truncated file while reading record header")
            (id_len,) = struct.unpack("<I", head)
            if f.tell() + id_len > file_size:
                raise CorruptFileError("record id extends past end of file")
            text_id = _read_exact(f, id_len, "record id").decode("utf-8")
            (tc,) = struct.unpack("<I", _read_exact(f, 4, f"token count of {text_id!r}"))
            if tc < 1:
                raise DataError(f"record {text_id!r} declares zero tokens")
            payload = layer_count * tc * hidden_size * 4
            if f.tell() + payload > file_size:
                raise CorruptFileError(f"record {text_id!r} payload extends past end of file")
            raw = np.frombuffer(
                _read_exact(f, payload, f"payload of {text_id!r}"), dtype="<f4"
            )
            cube = raw.astype(np.float64).reshape(layer_count, tc, hidden_size)
            if not np.isfinite(cube).all():
                raise DataError(f"record {text_id!r} contains nonfinite values")
            yield text_id, [
                DenseTokenMatrix(layer_index=j + 1, values=cube[j])
                for j in range(layer_count)
            ]
