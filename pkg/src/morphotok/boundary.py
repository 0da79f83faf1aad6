"""Boundary probabilities from bidirectional branching entropy, plus search.

``P(i) = logistic(slope * (0.5 * (H_fwd(i) + H_bwd(i)) - center))`` where
``H_fwd(i)`` is the entropy (nats) of the units observed after the longest
known left context ending at ``i`` and ``H_bwd(i)`` the entropy of the units
observed before the longest known right context starting at ``i``.

Segmentations are scored by Bernoulli configuration log-likelihood, which is
maximized exactly by :func:`optimal_segmentation` (DP over cut positions) and
by the exhaustive :func:`brute_force_segmentation` oracle.
"""

from __future__ import annotations

import itertools
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import (
    EmptyCorpusError,
    InfeasibleConstraints,
    PositionOutOfRange,
    SegmentationError,
    SequenceTooLong,
)

# Objective values closer than this are treated as ties.
P_EPS = 1e-12  # keeps log P and log(1-P) finite when a probability saturates
TIE_TOL = 1e-9
BRUTE_FORCE_MAX_LEN = 20


@dataclass(frozen=True)
class Segmentation:
    length: int
    boundaries: tuple[int, ...] = ()

    def __post_init__(self):
        b = tuple(int(p) for p in self.boundaries)
        object.__setattr__(self, "boundaries", b)
        if self.length < 0:
            raise SegmentationError("negative length")
        prev = 0
        for p in b:
            if not prev < p < self.length:
                raise SegmentationError(
                    f"boundaries must be strictly increasing interior positions: {b}")
            prev = p

    @classmethod
    def from_spans(cls, spans: Sequence[tuple[int, int]]) -> "Segmentation":
        length = spans[-1][1] if spans else 0
        return cls(length, tuple(start for start, _ in spans[1:]))

    @property
    def num_tokens(self) -> int:
        return len(self.boundaries) + 1 if self.length else 0

    def spans(self) -> list[tuple[int, int]]:
        cuts = (0, *self.boundaries, self.length)
        return list(zip(cuts[:-1], cuts[1:]))

    def tokens(self, sequence: str) -> list[str]:
        if len(sequence) != self.length:
            raise SegmentationError("sequence length does not match segmentation")
        return [sequence[a:b] for a, b in self.spans()]

    def indicator(self) -> np.ndarray:
        """0/1 vector over interior positions 1..length-1."""
        out = np.zeros(max(self.length - 1, 0), dtype=np.int8)
        for p in self.boundaries:
            out[p - 1] = 1
        return out


@dataclass(frozen=True)
class SegConstraints:
    max_token_len: int = 8
    min_token_len: int = 1

    def __post_init__(self):
        if self.min_token_len < 1 or self.max_token_len < 1:
            raise ValueError("token length bounds must be positive")
        if self.min_token_len > self.max_token_len:
            raise ValueError("min_token_len exceeds max_token_len")

    def admits(self, seg: Segmentation) -> bool:
        return all(self.min_token_len <= b - a <= self.max_token_len
                   for a, b in seg.spans())


def entropy(counts: Iterable[int]) -> float:
    counts = [c for c in counts if c > 0]
    total = sum(counts)
    if total == 0:
        return 0.0
    return -sum(c / total * math.log(c / total) for c in counts)


@dataclass
class BranchingStats:
    order: int
    forward_counts: dict[str, Counter]
    backward_counts: dict[str, Counter]
    total_units: int

    def __post_init__(self):
        self._h_fwd = {k: entropy(v.values()) for k, v in self.forward_counts.items()}
        self._h_bwd = {k: entropy(v.values()) for k, v in self.backward_counts.items()}

    def forward_entropy(self, sequence: str, i: int) -> Optional[float]:
        for k in range(min(self.order, i), 0, -1):
            h = self._h_fwd.get(sequence[i - k:i])
            if h is not None:
                return h
        return None

    def backward_entropy(self, sequence: str, i: int) -> Optional[float]:
        # Backward contexts are keyed as read in reversed text.
        for k in range(min(self.order, len(sequence) - i), 0, -1):
            h = self._h_bwd.get(sequence[i:i + k][::-1])
            if h is not None:
                return h
        return None

    def to_json(self) -> dict:
        return {
            "order": self.order,
            "forward": {k: dict(sorted(v.items())) for k, v in sorted(self.forward_counts.items())},
            "backward": {k: dict(sorted(v.items())) for k, v in sorted(self.backward_counts.items())},
            "total_units": self.total_units,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "BranchingStats":
        return cls(int(obj["order"]),
                   {k: Counter(v) for k, v in obj["forward"].items()},
                   {k: Counter(v) for k, v in obj["backward"].items()},
                   int(obj["total_units"]))


def _successor_counts(sequences: Iterable[str], order: int) -> dict[str, Counter]:
    table: dict[str, Counter] = {}
    for seq in sequences:
        for j in range(1, len(seq)):
            unit = seq[j]
            for k in range(1, min(order, j) + 1):
                ctx = seq[j - k:j]
                c = table.get(ctx)
                if c is None:
                    c = table[ctx] = Counter()
                c[unit] += 1
    return table


def fit_branching_stats(corpus, order: int = 2) -> BranchingStats:
    sequences = list(getattr(corpus, "sequences", corpus))
    if not sequences:
        raise EmptyCorpusError("cannot fit statistics on an empty corpus")
    if order < 1:
        raise ValueError("order must be >= 1")
    return BranchingStats(
        order,
        _successor_counts(sequences, order),
        _successor_counts((s[::-1] for s in sequences), order),
        sum(len(s) for s in sequences),
    )


def logistic(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


@dataclass
class BoundaryModel:
    stats: BranchingStats
    slope: float = 2.0
    center: float = 0.0

    def __post_init__(self):
        if not self.slope > 0:
            raise ValueError("slope must be positive")

    def mean_entropy(self, sequence: str, i: int) -> float:
        hf = self.stats.forward_entropy(sequence, i)
        hb = self.stats.backward_entropy(sequence, i)
        hf = self.center if hf is None else hf
        hb = self.center if hb is None else hb
        return 0.5 * (hf + hb)

    def probabilities(self, sequence: str) -> np.ndarray:
        """P(i) for every interior position i = 1..len-1."""
        h = np.array([self.mean_entropy(sequence, i) for i in range(1, len(sequence))],
                     dtype=float)
        return np.clip(logistic(self.slope * (h - self.center)), P_EPS, 1 - P_EPS)


def fit_boundary_model(corpus, order: int = 2, slope: float = 2.0) -> BoundaryModel:
    """Fit statistics and set the center to the corpus mean branching entropy."""
    stats = fit_branching_stats(corpus, order)
    model = BoundaryModel(stats, slope, 0.0)
    total, n = 0.0, 0
    for seq in getattr(corpus, "sequences", corpus):
        for i in range(1, len(seq)):
            hf = stats.forward_entropy(seq, i)
            hb = stats.backward_entropy(seq, i)
            if hf is not None and hb is not None:
                total += 0.5 * (hf + hb)
                n += 1
    model.center = total / n if n else 0.0
    return model


def boundary_probability(model: BoundaryModel, sequence: str, i: int) -> float:
    if not 0 < i < len(sequence):
        raise PositionOutOfRange(f"position {i} is not interior to a length-{len(sequence)} sequence")
    h = model.mean_entropy(sequence, i)
    return float(np.clip(logistic(model.slope * (h - model.center)), P_EPS, 1 - P_EPS))


def _probs(model_or_probs, sequence) -> np.ndarray:
    """Accept either a BoundaryModel or a precomputed P vector."""
    if isinstance(model_or_probs, BoundaryModel):
        return model_or_probs.probabilities(sequence)
    p = np.asarray(model_or_probs, dtype=float)
    if p.shape != (max(len(sequence) - 1, 0),):
        raise SegmentationError("probability vector must cover the interior positions")
    if np.any((p < 0) | (p > 1)) or not np.all(np.isfinite(p)):
        raise SegmentationError("boundary probabilities must lie in [0, 1]")
    # Exact 0 or 1 would make every configuration score -inf; keep logs finite.
    return np.clip(p, P_EPS, 1.0 - P_EPS)


def config_log_likelihood(model, sequence, seg: Segmentation) -> float:
    p = _probs(model, sequence)
    if seg.length != len(sequence):
        raise SegmentationError("segmentation length does not match sequence")
    b = seg.indicator().astype(bool)
    return float(np.sum(np.where(b, np.log(p), np.log1p(-p))))


def literal_entropy_score(model, sequence, seg: Segmentation) -> float:
    """Sum of P log P over the selected boundaries (diagnostic only; its argmax is degenerate)."""
    p = _probs(model, sequence)
    sel = p[[q - 1 for q in seg.boundaries]]
    return float(np.sum(sel * np.log(sel)))


def _better(score, count, cand_set, best_score, best_count, best_set) -> bool:
    """Ordering: higher score, then fewer boundaries, then lexicographically smaller."""
    if score > best_score + TIE_TOL:
        return True
    if score < best_score - TIE_TOL:
        return False
    if count != best_count:
        return count < best_count
    return cand_set() < best_set()


def optimal_segmentation(model, sequence, constraints: SegConstraints = SegConstraints()) -> Segmentation:
    n = len(sequence)
    if n < 1:
        raise SegmentationError("sequence must be non-empty")
    p = _probs(model, sequence)
    # Objective = sum(log(1-P)) + sum over boundaries of the log-odds gain.
    gain = np.log(p) - np.log1p(-p)
    lo, hi = constraints.min_token_len, constraints.max_token_len
    ninf = -math.inf
    score = [ninf] * (n + 1)
    count = [0] * (n + 1)
    back = [-1] * (n + 1)
    score[0] = 0.0

    def cuts(j):
        out = []
        while j > 0:
            out.append(j)
            j = back[j]
        return tuple(reversed(out))

    for j in range(1, n + 1):
        g = float(gain[j - 1]) if j < n else 0.0
        best = None
        for k in range(lo, min(hi, j) + 1):
            prev = j - k
            if score[prev] == ninf:
                continue
            s = score[prev] + g
            c = count[prev] + (1 if j < n else 0)
            if best is None or _better(s, c, lambda prev=prev: cuts(prev),
                                       best[0], best[1], lambda b=best[2]: cuts(b)):
                best = (s, c, prev)
        if best is not None:
            score[j], count[j], back[j] = best
    if score[n] == ninf:
        raise InfeasibleConstraints(
            f"no tiling of length {n} with token lengths in [{lo}, {hi}]")
    return Segmentation(n, cuts(back[n]))


def brute_force_segmentation(model, sequence, constraints: SegConstraints = SegConstraints()) -> Segmentation:
    n = len(sequence)
    if n > BRUTE_FORCE_MAX_LEN:
        raise SequenceTooLong(f"brute force limited to {BRUTE_FORCE_MAX_LEN} units")
    if n < 1:
        raise SegmentationError("sequence must be non-empty")
    p = _probs(model, sequence)
    best = None
    for r in range(n):
        for subset in itertools.combinations(range(1, n), r):
            seg = Segmentation(n, subset)
            if not constraints.admits(seg):
                continue
            s = config_log_likelihood(p, sequence, seg)
            if best is None or _better(s, r, lambda: subset, best[0], len(best[1]),
                                       lambda: best[1]):
                best = (s, subset)
    if best is None:
        raise InfeasibleConstraints(f"no admissible segmentation of length {n}")
    return Segmentation(n, best[1])
