"""Strings, token sequences, corpora and the two reversal operators.

Reversal works on Unicode scalar values (code points). Grapheme clusters are
not preserved, so combining marks may render oddly once reversed.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

TokenSeq = tuple[int, ...]


def reverse_string(s: str) -> str:
    return s[::-1]


def reverse_tokens(z: Sequence[int]) -> TokenSeq:
    return tuple(z[::-1])


@dataclass(frozen=True)
class Corpus:
    """A finite multiset of documents.

    Documents keep their input order (duplicates included) so that every
    reduction over the corpus runs in a fixed, reproducible order.
    """

    docs: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "docs", tuple(self.docs))
        for i, doc in enumerate(self.docs):
            if not isinstance(doc, str):
                raise TypeError(f"document {i} is not a string: {doc!r}")

    @classmethod
    def from_docs(cls, docs: Iterable[str]) -> "Corpus":
        return cls(tuple(docs))

    @property
    def multiplicities(self) -> Counter:
        return Counter(self.docs)

    def __len__(self) -> int:
        return len(self.docs)

    def __iter__(self):
        return iter(self.docs)

    def __getitem__(self, i):
        return self.docs[i]

    def alphabet(self) -> list[str]:
        """Sorted set of code points that occur anywhere in the corpus."""
        return sorted(set().union(*self.docs)) if self.docs else []

    def n_symbols(self) -> int:
        return sum(len(d) for d in self.docs)


def reverse_corpus(d: Corpus) -> Corpus:
    return Corpus(tuple(reverse_string(doc) for doc in d.docs))


def parse_corpus(text: str) -> Corpus:
    """One document per line; blank lines are kept as empty documents.

    A single trailing newline terminates the last line instead of starting a
    new empty document.
    """
    if text == "":
        return Corpus(())
    lines = text.split("\n")
    if text.endswith("\n"):
        lines.pop()
    return Corpus(tuple(lines))


def format_corpus(d: Corpus) -> str:
    return "".join(doc + "\n" for doc in d.docs)


def load_corpus(path: str | Path) -> Corpus:
    data = Path(path).read_bytes()
    return parse_corpus(data.decode("utf-8"))


def save_corpus(d: Corpus, path: str | Path) -> None:
    Path(path).write_bytes(format_corpus(d).encode("utf-8"))
