"""Helpers shared by the exporter tests: the fixture vocabulary, text
generation, TSV writing, and a minimal independent UHDE parser."""

import random
import struct

import numpy as np

SPECIALS = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
WORDS = [f"word{i}" for i in range(40)] + ["the", "a", "of", "on", "with"]
VOCAB = SPECIALS + WORDS

HIDDEN = 32
DEPTH = 4


def make_texts(count, seed=0, lo=3, hi=12):
    """Distinct pseudo-sentences over the fixture vocabulary.  Every
    word is a whole vocabulary token, so the subword count of a text
    equals its word count."""
    rng = random.Random(seed)
    rows = []
    seen = set()
    for i in range(count):
        while True:
            n = rng.randint(lo, hi)
            text = " ".join(rng.choice(WORDS) for _ in range(n))
            if text not in seen:
                break
        seen.add(text)
        rows.append((f"t{i:03d}", text))
    return rows


def write_tsv(path, rows):
    with open(path, "w", encoding="utf-8") as f:
        for text_id, text in rows:
            f.write(f"{text_id}\t{text}\n")
    return str(path)


def parse_uhde(path):
    """Header dict plus per-record (id, token count, (V, t, h) float32
    array), reading the raw layout directly."""
    with open(path, "rb") as f:
        magic = f.read(4)
        version, layer_count, hidden_size = struct.unpack("<III", f.read(12))
        header = {
            "magic": magic,
            "version": version,
            "layer_count": layer_count,
            "hidden_size": hidden_size,
        }
        records = []
        while True:
            head = f.read(4)
            if not head:
                break
            (id_len,) = struct.unpack("<I", head)
            text_id = f.read(id_len).decode("utf-8")
            (tc,) = struct.unpack("<I", f.read(4))
            raw = f.read(layer_count * tc * hidden_size * 4)
            values = np.frombuffer(raw, dtype="<f4").reshape(
                layer_count, tc, hidden_size
            )
            records.append((text_id, tc, values))
    return header, records
