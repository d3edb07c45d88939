"""Deterministic BPE and tokenization stability under string reversal.

Training rules:

* every code point is an ordinary symbol (no pre-tokenizer, whitespace included);
* each step merges the most frequent adjacent pair, counting overlapping
  occurrences and weighting by document multiplicity;
* ties go to the lexicographically smallest ``(left, right)`` pair;
* training stops at ``target_vocab`` tokens or when no pair occurs twice.

Token ids are assigned by sorting the token strings in code-point order, so
the id layout depends only on the final vocabulary and not on merge history.
There are no special tokens.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from .seqcore import Corpus, TokenSeq, reverse_string, reverse_tokens


class TokenizerError(ValueError):
    pass


class OutOfAlphabetError(TokenizerError):
    def __init__(self, symbol: str, offset: int, doc_index: int | None = None):
        self.symbol = symbol
        self.offset = offset
        self.doc_index = doc_index
        where = f"offset {offset}" if doc_index is None else f"document {doc_index}, offset {offset}"
        super().__init__(f"symbol {symbol!r} (U+{ord(symbol):04X}) at {where} is not in the base alphabet")


@dataclass(frozen=True)
class BpeTokenizer:
    base_alphabet: tuple[str, ...]
    merges: tuple[tuple[str, str], ...]
    vocab: dict[str, int] = field(compare=True)

    def __post_init__(self):
        ids = sorted(self.vocab.values())
        if ids != list(range(len(ids))):
            raise TokenizerError("vocab ids must be dense in [0, |V|)")
        known = set(self.base_alphabet)
        for left, right in self.merges:
            if left not in known or right not in known:
                raise TokenizerError(f"merge ({left!r}, {right!r}) uses an unknown operand")
            known.add(left + right)
        if known != set(self.vocab):
            raise TokenizerError("vocab does not match base alphabet plus merges")
        object.__setattr__(self, "_id_to_token", {i: t for t, i in self.vocab.items()})
        object.__setattr__(self, "_alphabet_set", frozenset(self.base_alphabet))

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def token(self, i: int) -> str:
        return self._id_to_token[i]

    def tokens(self) -> list[str]:
        return [self._id_to_token[i] for i in range(self.vocab_size)]

    def to_dict(self) -> dict:
        return {
            "base_alphabet": list(self.base_alphabet),
            "merges": [list(m) for m in self.merges],
            "vocab": dict(sorted(self.vocab.items(), key=lambda kv: kv[1])),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BpeTokenizer":
        return cls(
            base_alphabet=tuple(data["base_alphabet"]),
            merges=tuple((a, b) for a, b in data["merges"]),
            vocab={k: int(v) for k, v in data["vocab"].items()},
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), ensure_ascii=False, indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "BpeTokenizer":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class TrainingTrace:
    """Per-step record of events that can break mirror symmetry of training."""

    counts: list[int] = field(default_factory=list)
    tie_steps: list[int] = field(default_factory=list)
    tied_pairs: list[list[tuple[str, str]]] = field(default_factory=list)
    overlap_steps: list[int] = field(default_factory=list)

    @property
    def had_ties(self) -> bool:
        return bool(self.tie_steps)

    @property
    def had_overlaps(self) -> bool:
        return bool(self.overlap_steps)


def _build_vocab(alphabet, merges) -> dict[str, int]:
    tokens = set(alphabet)
    tokens.update(a + b for a, b in merges)
    return {t: i for i, t in enumerate(sorted(tokens))}


def _merge_pair(seq: list[str], left: str, right: str) -> tuple[list[str], bool]:
    """Replace non-overlapping occurrences left to right.

    Also reports whether a self-pair merge met an odd run of length >= 3, the
    one case where left-to-right and right-to-left application disagree.
    """
    out = []
    i = 0
    n = len(seq)
    odd_run = False
    while i < n:
        if i + 1 < n and seq[i] == left and seq[i + 1] == right:
            if left == right:
                j = i
                while j < n and seq[j] == left:
                    j += 1
                run = j - i
                if run >= 3 and run % 2 == 1:
                    odd_run = True
            out.append(left + right)
            i += 2
        else:
            out.append(seq[i])
            i += 1
    return out, odd_run


def _count_pairs(words: dict[tuple[str, ...], int]) -> Counter:
    pairs: Counter = Counter()
    for seq, mult in words.items():
        for a, b in zip(seq, seq[1:]):
            pairs[(a, b)] += mult
    return pairs


def train_bpe_with_trace(d: Corpus, target_vocab: int) -> tuple[BpeTokenizer, TrainingTrace]:
    if len(d) == 0:
        raise TokenizerError("empty corpus")
    alphabet = d.alphabet()
    if target_vocab < len(alphabet) or target_vocab < 1:
        raise TokenizerError(f"vocab too small: target {target_vocab} < alphabet size {len(alphabet)}")

    words: dict[tuple[str, ...], int] = {}
    for doc, mult in sorted(d.multiplicities.items()):
        words[tuple(doc)] = mult

    merges: list[tuple[str, str]] = []
    tokens = set(alphabet)
    trace = TrainingTrace()
    while len(tokens) < target_vocab:
        pairs = _count_pairs(words)
        if not pairs:
            break
        best_count = max(pairs.values())
        if best_count < 2:
            break
        candidates = sorted(p for p, c in pairs.items() if c == best_count)
        left, right = candidates[0]
        step = len(merges)
        trace.counts.append(best_count)
        if len(candidates) > 1:
            trace.tie_steps.append(step)
            trace.tied_pairs.append(candidates)
        merged_words: dict[tuple[str, ...], int] = {}
        odd = False
        for seq, mult in words.items():
            new_seq, odd_run = _merge_pair(list(seq), left, right)
            odd = odd or odd_run
            key = tuple(new_seq)
            merged_words[key] = merged_words.get(key, 0) + mult
        if odd:
            trace.overlap_steps.append(step)
        words = merged_words
        merges.append((left, right))
        tokens.add(left + right)

    tok = BpeTokenizer(tuple(alphabet), tuple(merges), _build_vocab(alphabet, merges))
    return tok, trace


def train_bpe(d: Corpus, target_vocab: int) -> BpeTokenizer:
    return train_bpe_with_trace(d, target_vocab)[0]


def char_tokenizer(d: Corpus) -> BpeTokenizer:
    """Zero-merge tokenizer over the corpus alphabet."""
    if len(d) == 0:
        raise TokenizerError("empty corpus")
    alphabet = d.alphabet()
    return BpeTokenizer(tuple(alphabet), (), _build_vocab(alphabet, ()))


def segment(t: BpeTokenizer, s: str) -> list[str]:
    alphabet = t._alphabet_set
    for offset, ch in enumerate(s):
        if ch not in alphabet:
            raise OutOfAlphabetError(ch, offset)
    seq = list(s)
    for left, right in t.merges:
        if len(seq) < 2:
            break
        seq, _ = _merge_pair(seq, left, right)
    return seq


def encode(t: BpeTokenizer, s: str) -> TokenSeq:
    return tuple(t.vocab[piece] for piece in segment(t, s))


def decode(t: BpeTokenizer, z) -> str:
    return "".join(t.token(i) for i in z)


def encode_corpus(t: BpeTokenizer, d: Corpus) -> list[TokenSeq]:
    out = []
    for i, doc in enumerate(d.docs):
        try:
            out.append(encode(t, doc))
        except OutOfAlphabetError as exc:
            raise OutOfAlphabetError(exc.symbol, exc.offset, doc_index=i) from None
    return out


@dataclass(frozen=True)
class VocabBijection:
    """Partial injective map between the ids of two vocabularies."""

    forward: dict[int, int]
    inverse: dict[int, int]
    source_size: int
    target_size: int

    def __post_init__(self):
        if len(set(self.forward.values())) != len(self.forward):
            raise ValueError("bijection is not injective")
        if {v: k for k, v in self.forward.items()} != self.inverse:
            raise ValueError("inverse does not match forward map")

    @property
    def coverage(self) -> float:
        return len(self.forward) / self.source_size if self.source_size else 1.0

    @property
    def is_total(self) -> bool:
        return len(self.forward) == self.source_size == self.target_size

    def apply(self, z) -> TokenSeq:
        return tuple(self.forward[i] for i in z)

    def as_permutation(self) -> list[int]:
        if not self.is_total:
            raise ValueError(
                f"bijection covers {len(self.forward)}/{self.source_size} ids; a full permutation is required"
            )
        return [self.forward[i] for i in range(self.source_size)]


def propose_reversal_bijection(t_fwd: BpeTokenizer, t_rev: BpeTokenizer) -> VocabBijection:
    """Map each forward token to the reverse tokenizer's token spelling it backwards."""
    forward = {}
    for tok, i in t_fwd.vocab.items():
        j = t_rev.vocab.get(reverse_string(tok))
        if j is not None:
            forward[i] = j
    inverse = {j: i for i, j in forward.items()}
    return VocabBijection(forward, inverse, t_fwd.vocab_size, t_rev.vocab_size)


@dataclass
class StabilityReport:
    coverage: float
    seq_stable_fraction: float
    merge_agreement: float
    n_docs: int
    violating_examples: list[dict]

    @property
    def stable(self) -> bool:
        return self.seq_stable_fraction == 1.0

    def to_dict(self) -> dict:
        return {
            "coverage": self.coverage,
            "seq_stable_fraction": self.seq_stable_fraction,
            "merge_agreement": self.merge_agreement,
            "n_docs": self.n_docs,
            "stable": self.stable,
            "violating_examples": self.violating_examples,
        }

    def table(self) -> str:
        rows = [
            ("vocab coverage", f"{self.coverage:.4f}"),
            ("sequence-stable fraction", f"{self.seq_stable_fraction:.4f}"),
            ("merge agreement", f"{self.merge_agreement:.4f}"),
            ("documents", str(self.n_docs)),
            ("stable under reversal", "yes" if self.stable else "no"),
        ]
        width = max(len(k) for k, _ in rows)
        lines = [f"{k:<{width}}  {v}" for k, v in rows]
        for ex in self.violating_examples:
            lines.append(f"  doc {ex['index']}: {ex['doc']!r}")
            lines.append(f"    mirrored {ex['mirrored_forward']}")
            if ex["expected"] is None:
                lines.append("    expected (a forward token has no reversed partner)")
            else:
                lines.append(f"    expected {ex['expected']}")
            lines.append(f"    got      {ex['reverse_tokens']}")
        return "\n".join(lines)


def merge_agreement(t_fwd: BpeTokenizer, t_rev: BpeTokenizer) -> float:
    if not t_fwd.merges:
        return 1.0
    partner = set(t_rev.merges)
    hits = sum((reverse_string(b), reverse_string(a)) in partner for a, b in t_fwd.merges)
    return hits / len(t_fwd.merges)


def stability_report(
    t_fwd: BpeTokenizer,
    t_rev: BpeTokenizer,
    pi: VocabBijection,
    d: Corpus,
    max_examples: int = 10,
) -> StabilityReport:
    """Check ``encode(t_rev, reverse(s)) == pi(reverse(encode(t_fwd, s)))`` per document.

    ``t_rev`` is expected to have been trained on the reversed corpus. A
    forward token with no image under ``pi`` makes that document unstable.
    """
    stable = 0
    examples = []
    for i, doc in enumerate(d.docs):
        try:
            z = encode(t_fwd, doc)
            zr = encode(t_rev, reverse_string(doc))
        except OutOfAlphabetError as exc:
            raise OutOfAlphabetError(exc.symbol, exc.offset, doc_index=i) from None
        rz = reverse_tokens(z)
        if all(k in pi.forward for k in rz):
            expected = [t_rev.token(pi.forward[k]) for k in rz]
        else:
            expected = None
        got = [t_rev.token(k) for k in zr]
        if expected == got:
            stable += 1
        elif len(examples) < max_examples:
            examples.append(
                {
                    "index": i,
                    "doc": doc,
                    "forward_tokens": [t_fwd.token(k) for k in z],
                    "mirrored_forward": [reverse_string(t_fwd.token(k)) for k in rz],
                    "expected": expected,
                    "reverse_tokens": got,
                }
            )
    n = len(d)
    return StabilityReport(
        coverage=pi.coverage,
        seq_stable_fraction=stable / n if n else 1.0,
        merge_agreement=merge_agreement(t_fwd, t_rev),
        n_docs=n,
        violating_examples=examples,
    )


def mirror_merges(merges) -> list[tuple[str, str]]:
    """Merge list a trainer would produce on reversed text, absent ties."""
    return [(reverse_string(b), reverse_string(a)) for a, b in merges]
