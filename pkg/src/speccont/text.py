"""Character-level tokenizer with explicit pad/sos/eos handling.

A Vocabulary is immutable once built; encode and decode are pure functions,
reserved ids never leak out of encode, and decode strips them, so
decode(encode(t)) == t for any in-vocabulary text.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

__all__ = ["Vocabulary", "build_vocab", "load_vocab", "save_vocab"]

_RESERVED = ("<pad>", "<sos>", "<eos>")


@dataclass(frozen=True)
class Vocabulary:
    symbols: tuple[str, ...]  # reserved first, then sorted characters
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.symbols) < 4:
            raise ValueError(f"vocabulary needs at least one non-reserved symbol, got {self.symbols}")
        if self.symbols[:3] != _RESERVED:
            raise ValueError(f"first three symbols must be {_RESERVED}, got {self.symbols[:3]}")
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("duplicate symbols in vocabulary")
        object.__setattr__(self, "_index", {s: i for i, s in enumerate(self.symbols)})

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def sos_id(self) -> int:
        return 1

    @property
    def eos_id(self) -> int:
        return 2

    @property
    def size(self) -> int:
        return len(self.symbols)

    def encode(self, text: str) -> list[int]:
        ids = []
        for ch in text:
            i = self._index.get(ch)
            if i is None or i < 3:
                raise ValueError(f"character {ch!r} is not in the vocabulary")
            ids.append(i)
        return ids

    def decode(self, ids) -> str:
        chars = []
        for i in ids:
            i = int(i)
            if not 0 <= i < self.size:
                raise ValueError(f"id {i} outside [0, {self.size})")
            if i >= 3:
                chars.append(self.symbols[i])
        return "".join(chars)


def build_vocab(corpus) -> Vocabulary:
    """Character inventory of the corpus lines, sorted, after the reserved ids."""
    lines = list(corpus)
    if not lines:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    chars = sorted({ch for line in lines for ch in line})
    if not chars:
        raise ValueError("corpus lines contain no characters")
    return Vocabulary(_RESERVED + tuple(chars))


def save_vocab(path: str | Path, vocab: Vocabulary) -> None:
    """One symbol per line, reserved tokens first; order is significant."""
    Path(path).write_text("\n".join(vocab.symbols) + "\n", encoding="utf-8")


def load_vocab(path: str | Path) -> Vocabulary:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return Vocabulary(tuple(lines))
