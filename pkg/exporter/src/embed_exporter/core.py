"""Export transformer hidden states to UHDE embedding files.

The UHDE layout (little endian): magic ``UHDE``, u32 version, u32 layer
count V, u32 hidden size h, then one record per text: u32 id byte
length, the UTF-8 id, u32 token count t, and V contiguous t x h blocks
of float32 values, one block per selected layer in ascending layer
order.  Values are raw hidden states, single precision, unnormalized;
all downstream transformation belongs to the consumer.

Start and end marker positions ([CLS]/[SEP] style) never appear in the
output, so a record's token count is the subword count of the text
itself.  Padding introduced by batching is likewise dropped.
"""

from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass
from typing import BinaryIO, Sequence

import numpy as np

__all__ = [
    "DEFAULT_LAYERS",
    "ExporterError",
    "ExportError",
    "ExportJob",
    "VerifyError",
    "VerifyReport",
    "export",
    "read_input_tsv",
    "verify",
]

UHDE_MAGIC = b"UHDE"
UHDE_VERSION = 1

DEFAULT_LAYERS: tuple[int, ...] = (2, 4, 6, 8, 10, 12)

log = logging.getLogger(__name__)


class ExporterError(RuntimeError):
    """Base class for everything this package raises on purpose."""


class ExportError(ExporterError):
    """Bad inputs, an unloadable model, or nonfinite activations."""


class VerifyError(ExporterError):
    """A written file disagrees with its header or its source texts."""


@dataclass(frozen=True)
class ExportJob:
    """One export: which texts, which model, which layers, where to.

    ``max_tokens`` caps the content subwords kept per text (typical
    budgets: 32 for queries, 180 for passages); longer texts are
    truncated, not rejected.  ``layers`` are 1-based encoder layer
    indices and become file layers 1..V in the order given, so they
    must be strictly increasing.
    """

    input_path: str
    model_id: str
    out_path: str
    layers: tuple[int, ...] = DEFAULT_LAYERS
    max_tokens: int = 180
    batch_size: int = 16

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(int(j) for j in self.layers))
        if not self.layers:
            raise ValueError("layers must not be empty")
        if self.layers[0] < 1:
            raise ValueError(f"layer indices are 1-based, got {self.layers[0]}")
        if any(b <= a for a, b in zip(self.layers, self.layers[1:])):
            raise ValueError(f"layers must be strictly increasing, got {self.layers}")
        if self.max_tokens < 1:
            raise ValueError(f"max_tokens must be positive, got {self.max_tokens}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")


@dataclass(frozen=True)
class VerifyReport:
    record_count: int
    layer_count: int
    hidden_size: int
    sampled_ids: tuple[str, ...] = ()
    max_deviation: float | None = None


def read_input_tsv(path: str | os.PathLike) -> list[tuple[str, str]]:
    """Parse ``id TAB text`` lines, keeping input order.

    An empty text field is allowed (such rows are skipped later, when
    tokenization yields nothing); an empty or duplicate id is not.
    """
    rows: list[tuple[str, str]] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ExportError(
                    f"{path}:{lineno}: expected 'id<TAB>text', got {len(parts)} fields"
                )
            text_id, text = parts
            if not text_id:
                raise ExportError(f"{path}:{lineno}: empty id")
            if text_id in seen:
                raise ExportError(f"{path}:{lineno}: duplicate id {text_id!r}")
            seen.add(text_id)
            rows.append((text_id, text))
    return rows


def _load(model_id: str):
    """Tokenizer and eval-mode model, or ExportError if unloadable."""
    from transformers import AutoModel, AutoTokenizer
    from transformers.utils import logging as hf_logging

    hf_logging.disable_progress_bar()
    try:
        tokenizer = AutoTokenizer.from_pretrained(model_id)
        model = AutoModel.from_pretrained(model_id)
    except (OSError, ValueError) as exc:
        raise ExportError(f"cannot load model {model_id!r}: {exc}") from exc
    model.eval()
    return tokenizer, model


def _check_depth(job: ExportJob, model) -> None:
    depth = int(model.config.num_hidden_layers)
    if job.layers[-1] > depth:
        raise ExportError(
            f"layer {job.layers[-1]} requested but model {job.model_id!r} "
            f"has {depth} layers"
        )


def _encode_batch(
    tokenizer,
    model,
    texts: Sequence[str],
    layers: Sequence[int],
    max_tokens: int,
    model_id: str,
) -> list[np.ndarray | None]:
    """Per text, the (V, t, h) float32 block, or None when no content
    tokens survive marker exclusion.  Raises on nonfinite activations,
    naming the first offending layer.
    """
    import torch

    enc = tokenizer(
        list(texts),
        padding=True,
        truncation=True,
        max_length=max_tokens + 2,
        return_special_tokens_mask=True,
        return_tensors="pt",
    )
    with torch.no_grad():
        out = model(
            input_ids=enc["input_ids"],
            attention_mask=enc["attention_mask"],
            output_hidden_states=True,
        )
    hidden = out.hidden_states
    keep = (enc["attention_mask"] == 1) & (enc["special_tokens_mask"] == 0)
    blocks: list[np.ndarray | None] = []
    for i in range(len(texts)):
        idx = keep[i].nonzero(as_tuple=True)[0][:max_tokens]
        if idx.numel() == 0:
            blocks.append(None)
            continue
        mats = []
        for j in layers:
            rows = hidden[j][i, idx]
            if not torch.isfinite(rows).all():
                raise ExportError(
                    f"nonfinite activation from model {model_id!r} at layer {j}"
                )
            mats.append(np.ascontiguousarray(rows.numpy(), dtype="<f4"))
        blocks.append(np.stack(mats))
    return blocks


def export(job: ExportJob) -> int:
    """Write every input text's selected hidden states; returns the
    record count.  Texts that tokenize to nothing are skipped with a
    logged id, everything else appears in input order.
    """
    rows = read_input_tsv(job.input_path)
    tokenizer, model = _load(job.model_id)
    _check_depth(job, model)
    hidden_size = int(model.config.hidden_size)
    count = 0
    with open(job.out_path, "wb") as f:
        f.write(UHDE_MAGIC)
        f.write(struct.pack("<III", UHDE_VERSION, len(job.layers), hidden_size))
        for start in range(0, len(rows), job.batch_size):
            batch = rows[start : start + job.batch_size]
            blocks = _encode_batch(
                tokenizer,
                model,
                [text for _, text in batch],
                job.layers,
                job.max_tokens,
                job.model_id,
            )
            for (text_id, _), block in zip(batch, blocks):
                if block is None:
                    log.warning("skipping %r: no content tokens", text_id)
                    continue
                id_bytes = text_id.encode("utf-8")
                f.write(struct.pack("<I", len(id_bytes)))
                f.write(id_bytes)
                f.write(struct.pack("<I", block.shape[1]))
                f.write(block.tobytes())
                count += 1
    return count


def _read_exact(f: BinaryIO, nbytes: int, context: str) -> bytes:
    data = f.read(nbytes)
    if len(data) != nbytes:
        raise VerifyError(f"truncated file while reading {context}")
    return data


def verify(job: ExportJob, sample_count: int, tolerance: float = 1e-5) -> VerifyReport:
    """Check a written file against its header and, for a sample of
    records, against freshly recomputed embeddings.

    ``sample_count`` records, evenly spaced over the file, are re-run
    through the model one at a time and compared value for value; the
    largest absolute deviation must stay under ``tolerance``.  With
    ``sample_count`` 0 only the header and record structure are read,
    so neither the model nor the input texts are touched.
    """
    if sample_count < 0:
        raise ValueError(f"sample_count must be >= 0, got {sample_count}")
    path = job.out_path
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != UHDE_MAGIC:
            raise VerifyError(f"{path}: bad magic {magic!r}")
        version, layer_count, hidden_size = struct.unpack(
            "<III", _read_exact(f, 12, "header")
        )
        if version != UHDE_VERSION:
            raise VerifyError(f"{path}: unsupported version {version}")
        if layer_count < 1 or hidden_size < 1:
            raise VerifyError(f"{path}: empty layer count or hidden size in header")
        records: list[tuple[str, int, int]] = []
        file_size = os.fstat(f.fileno()).st_size
        pos = f.tell()
        while pos < file_size:
            f.seek(pos)
            head = _read_exact(f, 4, "record header")
            (id_len,) = struct.unpack("<I", head)
            if f.tell() + id_len > file_size:
                raise VerifyError(f"{path}: record id extends past end of file")
            text_id = _read_exact(f, id_len, "record id").decode("utf-8")
            (tc,) = struct.unpack(
                "<I", _read_exact(f, 4, f"token count of {text_id!r}")
            )
            if tc < 1:
                raise VerifyError(f"{path}: record {text_id!r} declares zero tokens")
            payload = layer_count * tc * hidden_size * 4
            offset = f.tell()
            if offset + payload > file_size:
                raise VerifyError(
                    f"{path}: record {text_id!r} payload extends past end of file"
                )
            records.append((text_id, tc, offset))
            pos = offset + payload

    if layer_count != len(job.layers):
        raise VerifyError(
            f"{path}: header has {layer_count} layers, job selects {len(job.layers)}"
        )
    if sample_count == 0 or not records:
        return VerifyReport(len(records), layer_count, hidden_size)

    texts = dict(read_input_tsv(job.input_path))
    tokenizer, model = _load(job.model_id)
    _check_depth(job, model)
    if int(model.config.hidden_size) != hidden_size:
        raise VerifyError(
            f"{path}: header hidden size {hidden_size} but model "
            f"{job.model_id!r} has {model.config.hidden_size}"
        )

    take = min(sample_count, len(records))
    picks = sorted(set(np.linspace(0, len(records) - 1, take).astype(int).tolist()))
    sampled: list[str] = []
    worst = 0.0
    with open(path, "rb") as f:
        for i in picks:
            text_id, tc, offset = records[i]
            if text_id not in texts:
                raise VerifyError(
                    f"{path}: record {text_id!r} is not in {job.input_path}"
                )
            f.seek(offset)
            raw = _read_exact(
                f, layer_count * tc * hidden_size * 4, f"payload of {text_id!r}"
            )
            stored = np.frombuffer(raw, dtype="<f4").reshape(
                layer_count, tc, hidden_size
            )
            if not np.isfinite(stored).all():
                raise VerifyError(f"{path}: record {text_id!r} has nonfinite values")
            (block,) = _encode_batch(
                tokenizer, model, [texts[text_id]], job.layers, job.max_tokens,
                job.model_id,
            )
            if block is None or block.shape != stored.shape:
                got = None if block is None else block.shape
                raise VerifyError(
                    f"{path}: record {text_id!r} has shape {stored.shape}, "
                    f"recomputation gives {got}"
                )
            deviation = float(
                np.max(np.abs(stored.astype(np.float64) - block.astype(np.float64)))
            )
            worst = max(worst, deviation)
            sampled.append(text_id)
            if deviation >= tolerance:
                raise VerifyError(
                    f"{path}: record {text_id!r} deviates by {deviation:.3e} "
                    f"(tolerance {tolerance:.0e})"
                )
    return VerifyReport(len(records), layer_count, hidden_size, tuple(sampled), worst)
