"""Corpus ingestion: normalization, line splitting, whitespace gold, splits.

A sequence is a ``str`` whose characters (unicode scalar values) are the
atomic units. Spaces never survive into a sequence; when gold boundaries are
requested, each removed space is recorded as a boundary position in the
space-free unit stream.
"""

from __future__ import annotations

import json
import math
import re
import unicodedata
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DecodeError, EmptyCorpusError, MixedDomainError, TooFewSequences

_WS = re.compile(r"\s+")


def normalize(text: str, lowercase: bool = False) -> str:
    text = unicodedata.normalize("NFC", text)
    if lowercase:
        # lower() can emit decomposed sequences (e.g. U+0130), so recompose.
        text = unicodedata.normalize("NFC", text.lower())
    return _WS.sub(" ", text).strip()


@dataclass(frozen=True)
class RawDocument:
    path: str
    data: bytes
    domain_label: str

    def __post_init__(self):
        if not self.domain_label:
            raise ValueError("domain_label must be non-empty")

    @classmethod
    def from_path(cls, path, domain_label: str) -> "RawDocument":
        path = Path(path)
        return cls(str(path), path.read_bytes(), domain_label)


@dataclass
class Corpus:
    sequences: list[str]
    domain_label: str
    gold: Optional[list[frozenset[int]]] = None

    def __post_init__(self):
        if not self.sequences:
            raise EmptyCorpusError("corpus has no sequences")
        if any(not s for s in self.sequences):
            raise EmptyCorpusError("corpus contains an empty sequence")
        if self.gold is not None:
            if len(self.gold) != len(self.sequences):
                raise ValueError("gold must align with sequences")
            self.gold = [frozenset(g) for g in self.gold]
            for seq, g in zip(self.sequences, self.gold):
                if any(not 0 < p < len(seq) for p in g):
                    raise ValueError(f"gold boundary out of range for {seq!r}")

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def total_units(self) -> int:
        return sum(len(s) for s in self.sequences)

    def subset(self, indices: Sequence[int]) -> "Corpus":
        gold = None if self.gold is None else [self.gold[i] for i in indices]
        return Corpus([self.sequences[i] for i in indices], self.domain_label, gold)

    def to_json(self) -> dict:
        return {
            "domain": self.domain_label,
            "sequences": list(self.sequences),
            "gold": None if self.gold is None else [sorted(g) for g in self.gold],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Corpus":
        gold = obj.get("gold")
        return cls(list(obj["sequences"]), obj["domain"],
                   None if gold is None else [frozenset(g) for g in gold])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Corpus":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def strip_spaces(line: str) -> tuple[str, frozenset[int]]:
    """Remove spaces from a normalized line, returning the gold positions."""
    units = []
    gold = set()
    for word in line.split(" "):
        if units:
            gold.add(len(units))
        units.extend(word)
    return "".join(units), frozenset(gold)


def load_corpus(docs: Sequence[RawDocument], lowercase: bool = False,
                gold: bool = True) -> Corpus:
    labels = {d.domain_label for d in docs}
    if len(labels) > 1:
        raise MixedDomainError(f"documents disagree on domain: {sorted(labels)}")
    sequences: list[str] = []
    golds: list[frozenset[int]] = []
    for doc in docs:
        try:
            text = doc.data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError(f"{doc.path}: {exc}") from exc
        for raw_line in text.splitlines():
            line = normalize(raw_line, lowercase)
            if not line:
                continue
            seq, g = strip_spaces(line)
            sequences.append(seq)
            golds.append(g)
    if not sequences:
        raise EmptyCorpusError("no nonempty lines in input documents")
    return Corpus(sequences, labels.pop(), golds if gold else None)


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")


def split(corpus: Corpus, spec: SplitSpec) -> tuple[Corpus, Corpus]:
    n = len(corpus)
    if n < 2:
        raise TooFewSequences("need at least two sequences to split")
    order = np.random.default_rng(spec.seed).permutation(n)
    # Eval side keeps at least one sequence.
    n_train = min(math.ceil(spec.train_fraction * n - 1e-9), n - 1)
    train_idx = sorted(order[:n_train].tolist())
    eval_idx = sorted(order[n_train:].tolist())
    return corpus.subset(train_idx), corpus.subset(eval_idx)
