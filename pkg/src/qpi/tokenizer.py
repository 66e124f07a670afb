"""Vocabulary, subword tokenization and sequence encoding.

Text is lowercased, split on whitespace and punctuation, and every word is
decomposed by greedy longest-match against the vocabulary using ``##`` to
mark word-internal pieces. Encodings are right-padded to a fixed length.
"""

from __future__ import annotations

import unicodedata
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, UsageError

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP)
CONTINUATION = "##"
MAX_WORD_CHARS = 100


def _is_punctuation(ch: str) -> bool:
    cp = ord(ch)
    # ASCII symbols such as "$" or "^" are not Unicode "P*" but are split too.
    if 33 <= cp <= 47 or 58 <= cp <= 64 or 91 <= cp <= 96 or 123 <= cp <= 126:
        return True
    return unicodedata.category(ch).startswith("P")


def basic_split(text: str) -> list[str]:
    """Lowercase and split into words and single punctuation marks."""
    words: list[str] = []
    current: list[str] = []
    for ch in text.lower():
        if ch.isspace():
            if current:
                words.append("".join(current))
                current = []
        elif _is_punctuation(ch):
            if current:
                words.append("".join(current))
                current = []
            words.append(ch)
        else:
            current.append(ch)
    if current:
        words.append("".join(current))
    return words


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:4]) != SPECIAL_TOKENS:
            raise DataError(f"vocabulary must start with {', '.join(SPECIAL_TOKENS)}")
        if len(set(tokens)) != len(tokens):
            dupes = sorted(t for t, c in Counter(tokens).items() if c > 1)
            raise DataError(f"duplicate vocabulary entries: {dupes[:10]}")
        self.tokens: tuple[str, ...] = tuple(tokens)
        self.token_to_id: dict[str, int] = {t: i for i, t in enumerate(tokens)}

    pad_id = property(lambda self: self.token_to_id[PAD])
    unk_id = property(lambda self: self.token_to_id[UNK])
    cls_id = property(lambda self: self.token_to_id[CLS])
    sep_id = property(lambda self: self.token_to_id[SEP])

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, self.unk_id)

    def ids(self, tokens: Iterable[str]) -> list[int]:
        return [self.id_of(t) for t in tokens]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        try:
            lines = Path(path).read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise DataError(f"cannot read vocabulary file {path}: {exc}") from exc
        return cls(lines)


def build_vocab(corpus: Iterable[str], min_freq: int = 1) -> Vocab:
    """Specials first, then words with frequency >= ``min_freq`` by (-count, token)."""
    if min_freq < 1:
        raise UsageError("min_freq must be a positive integer")
    counts: Counter[str] = Counter()
    seen_any = False
    for text in corpus:
        seen_any = True
        counts.update(basic_split(text))
    if not seen_any:
        raise UsageError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_freq and t not in SPECIAL_TOKENS),
                  key=lambda t: (-counts[t], t))
    return Vocab(list(SPECIAL_TOKENS) + kept)


def wordpiece(word: str, vocab: Vocab) -> list[str]:
    """Greedy longest-match decomposition of one word; ``[UNK]`` if it gets stuck."""
    if len(word) > MAX_WORD_CHARS:
        return [UNK]
    pieces: list[str] = []
    start = 0
    while start < len(word):
        end = len(word)
        match = None
        while start < end:
            piece = word[start:end]
            if start > 0:
                piece = CONTINUATION + piece
            if piece in vocab:
                match = piece
                break
            end -= 1
        if match is None:
            return [UNK]
        pieces.append(match)
        start = end
    return pieces


def tokenize(text: str, vocab: Vocab) -> list[str]:
    tokens: list[str] = []
    for word in basic_split(text):
        tokens.extend(wordpiece(word, vocab))
    return tokens


def detokenize(tokens: Sequence[str]) -> str:
    """Join tokens with spaces, gluing ``##`` pieces onto the previous one."""
    out: list[str] = []
    for tok in tokens:
        if tok.startswith(CONTINUATION) and out:
            out[-1] += tok[len(CONTINUATION):]
        else:
            out.append(tok)
    return " ".join(out)


@dataclass(frozen=True)
class EncodedInput:
    ids: np.ndarray
    attention_mask: np.ndarray
    segment_ids: np.ndarray

    @property
    def length(self) -> int:
        """Number of non-padding positions."""
        return int(self.attention_mask.sum())

    def __len__(self) -> int:
        return len(self.ids)


def _finish(ids: list[int], segments: list[int], vocab: Vocab, max_len: int) -> EncodedInput:
    n = len(ids)
    pad = max_len - n
    return EncodedInput(
        ids=np.array(ids + [vocab.pad_id] * pad, dtype=np.int64),
        attention_mask=np.array([True] * n + [False] * pad),
        segment_ids=np.array(segments + [0] * pad, dtype=np.int64),
    )


def encode_single(tokens: Sequence[str], vocab: Vocab, max_len: int) -> EncodedInput:
    """``[CLS] tokens [SEP]`` truncated to ``max_len`` and right-padded."""
    if max_len < 3:
        raise UsageError(f"max_len must be at least 3, got {max_len}")
    body = list(tokens)[: max_len - 2]
    ids = [vocab.cls_id] + vocab.ids(body) + [vocab.sep_id]
    return _finish(ids, [0] * len(ids), vocab, max_len)


def truncate_pair(a: Sequence[str], b: Sequence[str], budget: int) -> tuple[list[str], list[str]]:
    """Drop tokens from the end of the longer side until ``len(a)+len(b) <= budget``.

    Ties trim ``b``.
    """
    a, b = list(a), list(b)
    while len(a) + len(b) > budget:
        if len(a) > len(b):
            a.pop()
        else:
            b.pop()
    return a, b


def encode_pair(tokens_a: Sequence[str], tokens_b: Sequence[str], vocab: Vocab, max_len: int) -> EncodedInput:
    """``[CLS] A [SEP] B [SEP]`` with segment 0 up to the first ``[SEP]`` and 1 after."""
    if max_len < 5:
        raise UsageError(f"max_len must be at least 5 for a packed pair, got {max_len}")
    a, b = truncate_pair(tokens_a, tokens_b, max_len - 3)
    first = [vocab.cls_id] + vocab.ids(a) + [vocab.sep_id]
    second = vocab.ids(b) + [vocab.sep_id]
    return _finish(first + second, [0] * len(first) + [1] * len(second), vocab, max_len)


@dataclass(frozen=True)
class EncodedBatch:
    ids: np.ndarray
    attention_mask: np.ndarray
    segment_ids: np.ndarray

    @classmethod
    def stack(cls, items: Sequence[EncodedInput]) -> "EncodedBatch":
        return cls(
            ids=np.stack([e.ids for e in items]),
            attention_mask=np.stack([e.attention_mask for e in items]),
            segment_ids=np.stack([e.segment_ids for e in items]),
        )

    @property
    def lengths(self) -> np.ndarray:
        return self.attention_mask.sum(axis=-1)

    def __len__(self) -> int:
        return self.ids.shape[0]
