"""Fixed-size ordinally-forgetting encoding, vocabulary and tokenization."""

from __future__ import annotations

import functools
import hashlib
import itertools
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autograd import Tensor, sparse_rows
from .errors import ConfigError, DataError

UNK = "<unk>"
BOUNDARY = "<s>"
UNK_ID = 0
BOUNDARY_ID = 1
RESERVED = (UNK, BOUNDARY)

DEFAULT_ALPHA = 0.7


class Vocabulary:
    """Immutable word <-> id mapping with reserved ids 0 (unknown) and 1 (boundary)."""

    def __init__(self, words: Iterable[str]):
        words = list(words)
        if tuple(words[:2]) != RESERVED:
            words = list(RESERVED) + [w for w in words if w not in RESERVED]
        if len(set(words)) != len(words):
            raise DataError("duplicate word in vocabulary")
        self._words = tuple(words)
        self._ids = {w: i for i, w in enumerate(self._words)}

    def __len__(self) -> int:
        return len(self._words)

    @property
    def size(self) -> int:
        return len(self._words)

    def __contains__(self, word: str) -> bool:
        return word in self._ids

    def id_of(self, word: str) -> int:
        return self._ids.get(word, UNK_ID)

    def word_of(self, idx: int) -> str:
        return self._words[idx]

    @property
    def words(self) -> tuple[str, ...]:
        return self._words

    def tokenize(self, line: str) -> list[int]:
        """Lowercased whitespace split, framed by boundary ids on both ends."""
        return [BOUNDARY_ID] + [self.id_of(w) for w in line.lower().split()] + [BOUNDARY_ID]

    def to_text(self) -> str:
        return "".join(w + "\n" for w in self._words)

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except FileNotFoundError as exc:
            raise DataError(f"vocabulary file not found: {path}") from exc
        words = text.split("\n")
        if words and words[-1] == "":
            words.pop()
        if tuple(words[:2]) != RESERVED:
            raise DataError(f"{path}: reserved tokens {RESERVED} must come first")
        return cls(words)


def check_alpha(alpha: float) -> float:
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"forgetting factor alpha must lie in (0, 1), got {alpha}")
    return float(alpha)


def fofe_encode(tokens: Sequence[int], alpha: float, vocab_size: int) -> np.ndarray:
    """Run z_t = alpha * z_{t-1} + onehot(w_t) from the zero vector."""
    check_alpha(alpha)
    z = np.zeros(vocab_size)
    for w in tokens:
        if not 0 <= w < vocab_size:
            raise IndexError(f"token id {w} out of range [0, {vocab_size})")
        z *= alpha
        z[w] += 1.0
    return z


def fofe_encode_embedded(tokens: Sequence[int], alpha: float, embedding: Tensor) -> Tensor:
    """1 x d encoding of ``tokens`` in embedding space, differentiable w.r.t. ``embedding``."""
    check_alpha(alpha)
    n = len(tokens)
    weights = alpha ** np.arange(n - 1, -1, -1, dtype=np.float64)
    return sparse_rows(embedding, np.zeros(n, dtype=np.int64), np.asarray(tokens, dtype=np.int64),
                       weights, 1)


@functools.lru_cache(maxsize=16)
def _enumerate_codes(alpha: float, vocab_size: int, max_len: int):
    seqs = [seq for n in range(max_len + 1)
            for seq in itertools.product(range(vocab_size), repeat=n)]
    codes = np.stack([fofe_encode(seq, alpha, vocab_size) for seq in seqs])
    return seqs, codes


def fofe_decode_bruteforce(code: np.ndarray, alpha: float, vocab_size: int,
                           max_len: int, tol: float = 1e-9) -> list[int] | None:
    """Return the only sequence of length <= max_len encoding to ``code``, else None."""
    check_alpha(alpha)
    code = np.asarray(code, dtype=np.float64)
    if code.shape != (vocab_size,) or np.any(code < 0):
        return None
    seqs, codes = _enumerate_codes(float(alpha), vocab_size, max_len)
    hits = np.flatnonzero(np.max(np.abs(codes - code), axis=1) <= tol)
    if len(hits) != 1:
        return None
    return list(seqs[hits[0]])


def context_entries(sentence: Sequence[int], targets: range | Sequence[int], alpha: float,
                    row_offset: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sparse (row, col, weight) entries for the FOFE histories of positions ``targets``.

    Position t uses history sentence[:t]; row_offset + i is the output row of targets[i].
    """
    sent = np.asarray(sentence, dtype=np.int64)
    t = np.asarray(targets, dtype=np.int64)
    lengths = t
    n = int(lengths.sum())
    if n == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, np.zeros(0)
    rows = np.repeat(np.arange(len(t), dtype=np.int64) + row_offset, lengths)
    starts = np.repeat(np.cumsum(lengths) - lengths, lengths)
    j = np.arange(n, dtype=np.int64) - starts
    tt = np.repeat(t, lengths)
    weights = alpha ** (tt - 1 - j).astype(np.float64)
    return rows, sent[j], weights


def encode_histories(embedding: Tensor, pieces: Sequence[tuple[Sequence[int], Sequence[int]]],
                     alpha: float) -> Tensor:
    """Stack embedded FOFE codes for (sentence, target positions) pieces into one batch."""
    rows, cols, weights = [], [], []
    offset = 0
    for sentence, targets in pieces:
        r, c, w = context_entries(sentence, targets, alpha, offset)
        rows.append(r)
        cols.append(c)
        weights.append(w)
        offset += len(targets)
    return sparse_rows(embedding, np.concatenate(rows), np.concatenate(cols),
                       np.concatenate(weights), offset)
