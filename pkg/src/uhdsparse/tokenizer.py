"""Word-level tokenization with a corpus-built vocabulary.

Texts are split on whitespace and punctuation, optionally lowercased,
mapped through a fixed vocabulary with an unknown-token fallback, and
truncated to a query or document length cap.  Subword schemes are the
business of external encoders; this pipeline is agnostic to them.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from uhdsparse.errors import DataError, EmptyTextError

__all__ = ["TokenizerConfig", "build_vocabulary", "split_words", "tokenize"]

UNKNOWN_TOKEN = "<unk>"

_WORD_RE = re.compile(r"\w+")


def split_words(text: str, lowercase: bool = True) -> list[str]:
    """Maximal runs of word characters; everything else is a separator."""
    if lowercase:
        text = text.lower()
    return _WORD_RE.findall(text)


@dataclass(frozen=True)
class TokenizerConfig:
    """Frozen vocabulary plus the length caps applied at tokenize time."""

    vocabulary: Mapping[str, int]
    unknown_id: int = 0
    lowercase: bool = True
    max_query_tokens: int = 32
    max_doc_tokens: int = 180

    def __post_init__(self):
        if self.max_query_tokens <= 0 or self.max_doc_tokens <= 0:
            raise ValueError("token length caps must be positive")
        ids = sorted(self.vocabulary.values())
        if not ids:
            raise ValueError("vocabulary must not be empty")
        if ids != list(range(len(ids))):
            raise ValueError("vocabulary ids must be exactly 0..size-1")
        if not (0 <= self.unknown_id < len(ids)):
            raise ValueError("unknown_id outside vocabulary range")

    @property
    def vocab_size(self) -> int:
        return len(self.vocabulary)

    def id_to_token(self) -> list[str]:
        """Tokens in id order, the inverse of the vocabulary map."""
        out = [""] * self.vocab_size
        for tok, i in self.vocabulary.items():
            out[i] = tok
        return out

    @classmethod
    def from_token_list(
        cls,
        tokens: list[str],
        unknown_id: int = 0,
        lowercase: bool = True,
        max_query_tokens: int = 32,
        max_doc_tokens: int = 180,
    ) -> "TokenizerConfig":
        if len(set(tokens)) != len(tokens):
            raise DataError("duplicate token in vocabulary list")
        return cls(
            vocabulary={tok: i for i, tok in enumerate(tokens)},
            unknown_id=unknown_id,
            lowercase=lowercase,
            max_query_tokens=max_query_tokens,
            max_doc_tokens=max_doc_tokens,
        )


def build_vocabulary(
    texts: Iterable[str],
    max_size: int = 30000,
    lowercase: bool = True,
    max_query_tokens: int = 32,
    max_doc_tokens: int = 180,
) -> TokenizerConfig:
    """Keep the ``max_size - 1`` most frequent words plus the unknown
    token at id 0.  Frequency ties break alphabetically so the result is
    independent of corpus order."""
    if max_size < 2:
        raise ValueError("max_size must leave room for the unknown token")
    counts = Counter()
    for text in texts:
        counts.update(split_words(text, lowercase))
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    tokens = [UNKNOWN_TOKEN] + [tok for tok, _ in ranked[: max_size - 1]]
    return TokenizerConfig.from_token_list(
        tokens,
        unknown_id=0,
        lowercase=lowercase,
        max_query_tokens=max_query_tokens,
        max_doc_tokens=max_doc_tokens,
    )


def tokenize(text: str, cfg: TokenizerConfig, is_query: bool) -> list[int]:
    """Map a text to vocabulary ids, truncated to the applicable cap.

    Raises :class:`EmptyTextError` when nothing survives splitting.
    """
    words = split_words(text, cfg.lowercase)
    if not words:
        raise EmptyTextError(f"no tokens after normalization: {text!r}")
    cap = cfg.max_query_tokens if is_query else cfg.max_doc_tokens
    return [cfg.vocabulary.get(w, cfg.unknown_id) for w in words[:cap]]
