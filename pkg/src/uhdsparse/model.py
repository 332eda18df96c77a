"""Model bundle: tokenizer + optional toy encoder + bucket plan.

A checkpoint file carries everything needed to encode text again later:
the WTA layers with their masks, the toy encoder parameters when one was
trained, and the vocabulary.  Models built over externally exported
embeddings carry no encoder or vocabulary; they can only encode from
dense per-layer matrices.

File layout (little endian): magic "UHDW", u32 version, u32 bucket
count, then per bucket a fixed header (j, m, h, n, train_k, f32
sparsity) followed by the mask bitset, W as float32 row-major and b as
float32.  A flag byte then marks whether toy-encoder parameters follow
(dimension headers plus float32 arrays, window width, nonlinearity
code), and a second flag byte whether a vocabulary section follows.
Bucket weights are query-time state, not model state, and are not
persisted here.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import BinaryIO, Sequence

import numpy as np

from uhdsparse.encoder import (
    NONLINEARITIES,
    DenseTokenMatrix,
    MixingLayer,
    ToyEncoder,
    encode_layers,
)
from uhdsparse.errors import CorruptFileError, FormatError, UhdError
from uhdsparse.sparse import BucketedRepresentation
from uhdsparse.tokenizer import TokenizerConfig, tokenize
from uhdsparse.wta import BucketPlan, PlanEntry, WtaLayer, encode_representation

__all__ = ["SparseModel", "save_checkpoint", "load_checkpoint"]

UHDW_MAGIC = b"UHDW"
UHDW_VERSION = 1


@dataclass
class SparseModel:
    """Everything needed to turn a text into a bucketed representation."""

    plan: BucketPlan
    encoder: ToyEncoder | None = None
    tokenizer: TokenizerConfig | None = None

    def __post_init__(self):
        if self.encoder is not None:
            h = self.encoder.hidden_size
            need = max(e.layer_index for e in self.plan)
            if self.encoder.depth < need:
                raise ValueError(
                    f"plan sources layer {need} but encoder has depth {self.encoder.depth}"
                )
            for entry in self.plan:
                if entry.wta.input_size != h:
                    raise ValueError("WTA input size does not match encoder hidden size")
        if (self.encoder is None) != (self.tokenizer is None):
            raise ValueError("encoder and tokenizer come together or not at all")

    @property
    def hidden_size(self) -> int:
        return self.plan.entries[0].wta.input_size

    def encode_text(
        self,
        text: str,
        is_query: bool,
        infer_k: int | None = None,
        quantize: bool = True,
    ) -> BucketedRepresentation:
        if self.encoder is None or self.tokenizer is None:
            raise UhdError("model carries no text encoder; encode from embeddings")
        ids = tokenize(text, self.tokenizer, is_query)
        return encode_representation(
            encode_layers(ids, self.encoder), self.plan, infer_k, quantize
        )

    def encode_dense(
        self,
        layers_dense: Sequence[DenseTokenMatrix],
        infer_k: int | None = None,
        quantize: bool = True,
    ) -> BucketedRepresentation:
        return encode_representation(layers_dense, self.plan, infer_k, quantize)


def _write_array_f32(f: BinaryIO, arr: np.ndarray) -> None:
    f.write(struct.pack("<II", arr.shape[0], arr.shape[1] if arr.ndim == 2 else 0))
    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save_checkpoint(model: SparseModel, path: str | os.PathLike) -> None:
    plan = model.plan
    with open(path, "wb") as f:
        f.write(UHDW_MAGIC)
        f.write(struct.pack("<II", UHDW_VERSION, len(plan)))
        for entry in plan:
            wta = entry.wta
            f.write(
                struct.pack(
                    "<IIIIIf",
                    entry.layer_index,
                    entry.aspect_index,
                    wta.input_size,
                    wta.output_size,
                    wta.train_k,
                    wta.weight_sparsity,
                )
            )
            bits = np.packbits(wta.mask.reshape(-1).astype(np.uint8))
            f.write(bits.tobytes())
            f.write(np.ascontiguousarray(wta.w, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(wta.b, dtype="<f4").tobytes())
        if model.encoder is None:
            f.write(b"\x00")
        else:
            enc = model.encoder
            f.write(b"\x01")
            _write_array_f32(f, enc.embedding)
            f.write(struct.pack("<I", enc.depth))
            for layer in enc.layers:
                _write_array_f32(f, layer.w)
                _write_array_f32(f, layer.b)
            f.write(struct.pack("<IB", enc.window, NONLINEARITIES.index(enc.nonlinearity)))
        if model.tokenizer is None:
            f.write(b"\x00")
        else:
            tok = model.tokenizer
            f.write(b"\x01")
            tokens = tok.id_to_token()
            f.write(struct.pack("<I", len(tokens)))
            for t in tokens:
                raw = t.encode("utf-8")
                f.write(struct.pack("<I", len(raw)))
                f.write(raw)
            f.write(
                struct.pack(
                    "<IBII",
                    tok.unknown_id,
                    int(tok.lowercase),
                    tok.max_query_tokens,
                    tok.max_doc_tokens,
                )
            )


def _read_exact(f: BinaryIO, nbytes: int, what: str) -> bytes:
    data = f.read(nbytes)
    if len(data) != nbytes:
        raise CorruptFileError(f"truncated checkpoint while reading {what}")
    return data


def _read_array_f32(f: BinaryIO, what: str) -> np.ndarray:
    rows, cols = struct.unpack("<II", _read_exact(f, 8, f"{what} header"))
    count = rows * cols if cols else rows
    raw = np.frombuffer(_read_exact(f, count * 4, what), dtype="<f4")
    arr = raw.astype(np.float64)
    return arr.reshape(rows, cols) if cols else arr


def _infer_mode(keys: list[tuple[int, int]]) -> str:
    if len(keys) == 1:
        return "single"
    layers = {j for j, _ in keys}
    if len(layers) == 1:
        return "horizontal"
    return "vertical"


def load_checkpoint(path: str | os.PathLike) -> SparseModel:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != UHDW_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {UHDW_MAGIC!r}")
        version, bucket_count = struct.unpack("<II", _read_exact(f, 8, "header"))
        if version != UHDW_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        if bucket_count < 1:
            raise CorruptFileError("checkpoint declares no buckets")
        entries = []
        for i in range(bucket_count):
            j, m, h, n, train_k, sparsity = struct.unpack(
                "<IIIIIf", _read_exact(f, 24, f"bucket {i} header")
            )
            mask_bytes = (h * n + 7) // 8
            bits = np.frombuffer(
                _read_exact(f, mask_bytes, f"bucket {i} mask"), dtype=np.uint8
            )
            mask = np.unpackbits(bits, count=h * n).reshape(h, n).astype(np.float64)
            w = (
                np.frombuffer(_read_exact(f, h * n * 4, f"bucket {i} W"), dtype="<f4")
                .astype(np.float64)
                .reshape(h, n)
            )
            b = np.frombuffer(
                _read_exact(f, n * 4, f"bucket {i} b"), dtype="<f4"
            ).astype(np.float64)
            wta = WtaLayer(w, b, mask, train_k, weight_sparsity=round(sparsity, 6))
            entries.append(PlanEntry(j, m, wta))
        mode = _infer_mode([(e.layer_index, e.aspect_index) for e in entries])
        plan = BucketPlan(tuple(entries), mode)
        encoder = None
        (enc_flag,) = _read_exact(f, 1, "encoder flag")
        if enc_flag:
            embedding = _read_array_f32(f, "embedding table")
            (depth,) = struct.unpack("<I", _read_exact(f, 4, "encoder depth"))
            layers = []
            for i in range(depth):
                w = _read_array_f32(f, f"mixing layer {i} W")
                b = _read_array_f32(f, f"mixing layer {i} b")
                layers.append(MixingLayer(w, b))
            window, nl_code = struct.unpack("<IB", _read_exact(f, 5, "encoder tail"))
            if nl_code >= len(NONLINEARITIES):
                raise CorruptFileError(f"unknown nonlinearity code {nl_code}")
            encoder = ToyEncoder(
                embedding, layers, window=window, nonlinearity=NONLINEARITIES[nl_code]
            )
        tokenizer = None
        (tok_flag,) = _read_exact(f, 1, "tokenizer flag")
        if tok_flag:
            (count,) = struct.unpack("<I", _read_exact(f, 4, "vocabulary size"))
            tokens = []
            for i in range(count):
                (length,) = struct.unpack("<I", _read_exact(f, 4, f"token {i} length"))
                tokens.append(_read_exact(f, length, f"token {i}").decode("utf-8"))
            unknown_id, lowercase, max_q, max_d = struct.unpack(
                "<IBII", _read_exact(f, 13, "tokenizer tail")
            )
            tokenizer = TokenizerConfig.from_token_list(
                tokens,
                unknown_id=unknown_id,
                lowercase=bool(lowercase),
                max_query_tokens=max_q,
                max_doc_tokens=max_d,
            )
        if f.read(1):
            raise CorruptFileError("trailing bytes after checkpoint payload")
    return SparseModel(plan=plan, encoder=encoder, tokenizer=tokenizer)
