"""Static byte-pair-encoding baseline over unit sequences.

Training greedily merges the most frequent adjacent pair (ties broken by the
lexicographic order of ``(left, right)``) and stops early once no pair occurs
at least twice. Encoding replays the merge list in training order.
"""

from __future__ import annotations

import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .boundary import Segmentation
from .errors import EmptyCorpusError


@dataclass
class BpeVocab:
    merges: list[tuple[str, str]] = field(default_factory=list)
    alphabet: frozenset = frozenset()

    def __post_init__(self):
        self.merges = [(str(a), str(b)) for a, b in self.merges]
        self.alphabet = frozenset(self.alphabet)
        known = set(self.alphabet)
        for a, b in self.merges:
            if a not in known or b not in known:
                raise ValueError(f"merge ({a!r}, {b!r}) uses a form not built by earlier merges")
            known.add(a + b)

    def __len__(self) -> int:
        return len(self.merges)

    def to_json(self) -> dict:
        return {"alphabet": sorted(self.alphabet), "merges": [list(m) for m in self.merges]}

    @classmethod
    def from_json(cls, obj) -> "BpeVocab":
        return cls([tuple(m) for m in obj["merges"]], frozenset(obj["alphabet"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), ensure_ascii=False), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "BpeVocab":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def _pairs(word: Sequence[str]) -> Counter:
    return Counter(zip(word[:-1], word[1:]))


def _merge_word(word: list[str], a: str, b: str) -> list[str]:
    out = []
    i = 0
    n = len(word)
    while i < n:
        if i + 1 < n and word[i] == a and word[i + 1] == b:
            out.append(a + b)
            i += 2
        else:
            out.append(word[i])
            i += 1
    return out


def train_bpe(corpus, num_merges: int) -> BpeVocab:
    sequences = list(getattr(corpus, "sequences", corpus))
    if not sequences:
        raise EmptyCorpusError("cannot train BPE on an empty corpus")
    if num_merges < 0:
        raise ValueError("num_merges must be >= 0")
    alphabet = frozenset(u for s in sequences for u in s)

    freq = Counter(sequences)
    words = [list(s) for s in freq]
    weights = list(freq.values())
    counts: Counter = Counter()
    where: dict[tuple[str, str], set[int]] = defaultdict(set)
    for j, w in enumerate(words):
        for p, c in _pairs(w).items():
            counts[p] += c * weights[j]
            where[p].add(j)

    merges: list[tuple[str, str]] = []
    while len(merges) < num_merges:
        if not counts:
            break
        # Highest count first, then the lexicographically smallest pair.
        best = min(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        (a, b), c = best
        if c < 2:
            break
        merges.append((a, b))
        for j in sorted(where.pop((a, b), ())):
            old = words[j]
            new = _merge_word(old, a, b)
            for p, k in _pairs(old).items():
                counts[p] -= k * weights[j]
                if counts[p] <= 0:
                    del counts[p]
                if p != (a, b):
                    where[p].discard(j)
            for p, k in _pairs(new).items():
                counts[p] += k * weights[j]
                where[p].add(j)
            words[j] = new
        counts.pop((a, b), None)
    return BpeVocab(merges, alphabet)


def encode_tokens(vocab: BpeVocab, sequence: str) -> list[str]:
    """Apply every merge, in training order, to the unit sequence."""
    word = list(sequence)
    for a, b in vocab.merges:
        if len(word) < 2:
            break
        word = _merge_word(word, a, b)
    return word


def encode(vocab: BpeVocab, sequence: str) -> Segmentation:
    cuts = []
    pos = 0
    for tok in encode_tokens(vocab, sequence)[:-1]:
        pos += len(tok)
        cuts.append(pos)
    return Segmentation(len(sequence), tuple(cuts))


def encode_corpus(vocab: BpeVocab, sequences: Iterable[str]) -> list[Segmentation]:
    return [encode(vocab, s) for s in sequences]
