"""Synthetic planted-vocabulary corpora with known word boundaries."""

from __future__ import annotations

import string
from dataclasses import dataclass
from typing import Union

import numpy as np

from .corpus import Corpus, RawDocument, load_corpus


@dataclass(frozen=True)
class PlantedSpec:
    num_words: int = 50
    min_len: int = 2
    max_len: int = 5
    alphabet_size: int = 10
    min_units: int = 100_000
    words_per_line: Union[int, tuple[int, int]] = 20  # fixed, or an inclusive (lo, hi) range
    zipf_exponent: float = 1.0  # 0 gives a uniform word distribution
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.alphabet_size <= 26:
            raise ValueError("alphabet_size must be in 1..26")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        capacity = sum(self.alphabet_size ** n for n in range(self.min_len, self.max_len + 1))
        if self.num_words > capacity:
            raise ValueError("alphabet too small for that many distinct words")
        lo, hi = self.line_range
        if not 1 <= lo <= hi:
            raise ValueError("words_per_line must be positive (and lo <= hi for a range)")

    @property
    def line_range(self) -> tuple[int, int]:
        w = self.words_per_line
        if isinstance(w, int):
            return w, w
        lo, hi = w
        return int(lo), int(hi)


def planted_words(spec: PlantedSpec) -> list[str]:
    rng = np.random.default_rng([spec.seed, 0])
    alphabet = np.array(list(string.ascii_lowercase[:spec.alphabet_size]))
    words: list[str] = []
    seen = set()
    while len(words) < spec.num_words:
        n = int(rng.integers(spec.min_len, spec.max_len + 1))
        w = "".join(rng.choice(alphabet, n))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def planted_lines(spec: PlantedSpec) -> tuple[list[str], list[str]]:
    """Return (space-separated lines, word inventory)."""
    words = planted_words(spec)
    rng = np.random.default_rng([spec.seed, 1])
    weights = 1.0 / np.arange(1, len(words) + 1) ** spec.zipf_exponent
    weights /= weights.sum()
    lines: list[str] = []
    units = 0
    lo, hi = spec.line_range
    while units < spec.min_units:
        n = lo if lo == hi else int(rng.integers(lo, hi + 1))
        picks = rng.choice(len(words), n, p=weights)
        line = [words[i] for i in picks]
        units += sum(len(w) for w in line)
        lines.append(" ".join(line))
    return lines, words


def planted_corpus(spec: PlantedSpec = PlantedSpec(), domain: str = "planted") -> Corpus:
    lines, _ = planted_lines(spec)
    doc = RawDocument(f"<planted seed={spec.seed}>", "\n".join(lines).encode("utf-8"), domain)
    return load_corpus([doc], lowercase=False, gold=True)
