"""Reversible whitespace text<->id mapping with reserved special tokens.

The classifier and generator may hold separate Vocab instances; the two
components share no parameters or vocabulary. External subword tokenizers
can be plugged in by implementing the same encode/decode surface.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .errors import DecodeError

PAD, CLS, SEP, EOS, UNK = "[PAD]", "[CLS]", "[SEP]", "[EOS]", "[UNK]"
SPECIAL_TOKENS = (PAD, CLS, SEP, EOS, UNK)

PAD_ID, CLS_ID, SEP_ID, EOS_ID, UNK_ID = range(5)


@dataclass(frozen=True)
class Vocab:
    """Immutable bijection between tokens and ids; specials occupy ids 0..4."""

    id_to_token: tuple[str, ...]

    def __post_init__(self) -> None:
        assert self.id_to_token[:5] == SPECIAL_TOKENS
        object.__setattr__(
            self, "_token_to_id", {t: i for i, t in enumerate(self.id_to_token)}
        )

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_id

    def token_id(self, token: str) -> int:
        return self._token_to_id.get(token, UNK_ID)

    def token(self, token_id: int) -> str:
        if not 0 <= token_id < len(self.id_to_token):
            raise DecodeError(f"id {token_id} outside vocabulary of size {len(self)}")
        return self.id_to_token[token_id]

    def save(self, path: str | Path) -> None:
        """One token per line; the line number is the id."""
        with open(path, "w", encoding="utf-8") as fh:
            for token in self.id_to_token:
                fh.write(token + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            tokens = tuple(line.rstrip("\n") for line in fh)
        return cls(tokens)


def build_vocab(corpus: Iterable[str], max_size: int = 30_000) -> Vocab:
    """Frequency-ranked whitespace vocabulary; ties break lexicographically."""
    if max_size < len(SPECIAL_TOKENS) + 1:
        raise ValueError(f"max_size must be >= {len(SPECIAL_TOKENS) + 1}")
    counts: Counter[str] = Counter()
    for text in corpus:
        counts.update(t for t in text.split() if t not in SPECIAL_TOKENS)
    ranked = sorted(counts.items(), key=lambda item: (-item[1], item[0]))
    budget = max_size - len(SPECIAL_TOKENS)
    return Vocab(SPECIAL_TOKENS + tuple(token for token, _ in ranked[:budget]))


def encode(text: str, vocab: Vocab, max_len: int = 256) -> list[int]:
    """Whitespace-split and map to ids, truncating from the right.

    Literal special-token strings map to their reserved ids; unknown
    tokens map to UNK. When truncation fires and the original sequence
    ended in EOS, the trailing EOS is preserved.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    ids = [vocab.token_id(token) for token in text.split()]
    if len(ids) > max_len:
        had_eos = bool(ids) and ids[-1] == EOS_ID
        ids = ids[:max_len]
        if had_eos:
            ids[-1] = EOS_ID
    return ids


def decode(ids: Sequence[int], vocab: Vocab) -> str:
    """Inverse of encode: drop PAD, stop rendering at the first EOS."""
    tokens = []
    for token_id in ids:
        if token_id == PAD_ID:
            continue
        if token_id == EOS_ID:
            break
        tokens.append(vocab.token(int(token_id)))
    return " ".join(tokens)
