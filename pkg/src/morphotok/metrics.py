"""Evaluation metrics, the bigram perplexity evaluator, and report assembly."""

from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .boundary import Segmentation
from .errors import (
    EmptyCorpusError,
    EmptyEval,
    EmptyState,
    LengthMismatch,
    MalformedReport,
    NonpositiveInput,
    NoSharedForms,
    TooFewIterations,
    TooFewTraces,
)

START = "<s>"
UNK = "<unk>"


def token_stability_score(seg_a: Segmentation, seg_b: Segmentation) -> float:
    """Dice divergence of two boundary sets: 0 identical, 1 disjoint."""
    if seg_a.length != seg_b.length:
        raise LengthMismatch("segmentations cover different lengths")
    a, b = set(seg_a.boundaries), set(seg_b.boundaries)
    if not a and not b:
        return 0.0
    return 1.0 - 2.0 * len(a & b) / (len(a) + len(b))


def coherence_index(state, cfg=None) -> float:
    """Mean windowed coherence over every token occurrence of a morphogenesis state."""
    from .manifold import CoherenceConfig
    from .morphogenesis import Layout, _token_coherence

    cfg = cfg or CoherenceConfig()
    layout = Layout(state)
    if len(layout) == 0:
        raise EmptyState("state holds no tokens")
    E = state.table.vectors[layout.ids(state.table)]
    return float(np.mean(_token_coherence(E, layout, cfg)[0]))


class BigramLm:
    """Add-k smoothed token bigram model; sequence starts are conditioned on ``<s>``."""

    def __init__(self, vocab: Iterable[str], k: float = 0.1, counts: Optional[Mapping] = None):
        if not k > 0:
            raise ValueError("smoothing constant k must be positive")
        self.vocab = frozenset(vocab)
        if not self.vocab:
            raise ValueError("vocabulary must be nonempty")
        self.k = float(k)
        self.counts: dict[str, Counter] = defaultdict(Counter)
        for prev, row in (counts or {}).items():
            for tok, c in row.items():
                if c < 0:
                    raise ValueError("counts must be >= 0")
                self.counts[prev][tok] += int(c)
        self._totals = {p: sum(r.values()) for p, r in self.counts.items()}

    @classmethod
    def fit(cls, token_sequences: Iterable[Sequence[str]], k: float = 0.1) -> "BigramLm":
        seqs = [list(s) for s in token_sequences]
        vocab = {t for s in seqs for t in s} | {UNK}
        counts: dict[str, Counter] = defaultdict(Counter)
        for s in seqs:
            prev = START
            for t in s:
                counts[prev][t] += 1
                prev = t
        return cls(vocab, k, counts)

    def _map(self, tok: str) -> str:
        if tok in self.vocab:
            return tok
        if UNK in self.vocab:
            return UNK
        raise KeyError(f"token {tok!r} outside the vocabulary")

    def log_prob(self, prev: str, tok: str) -> float:
        prev = prev if prev == START else self._map(prev)
        tok = self._map(tok)
        row = self.counts.get(prev)
        c = row[tok] if row else 0
        total = self._totals.get(prev, 0)
        return math.log((c + self.k) / (total + self.k * len(self.vocab)))

    def sequence_log_prob(self, tokens: Sequence[str]) -> float:
        lp = 0.0
        prev = START
        for t in tokens:
            lp += self.log_prob(prev, t)
            prev = t
        return lp


def char_perplexity(lm: BigramLm, token_sequences: Iterable[Sequence[str]]) -> float:
    """exp(-NLL / number of units): comparable across segmentations of the same text."""
    nll = 0.0
    units = 0
    for toks in token_sequences:
        nll -= lm.sequence_log_prob(toks)
        units += sum(len(t) for t in toks)
    if units == 0:
        raise EmptyEval("evaluation corpus holds no units")
    return math.exp(nll / units)


def perplexity_reduction_ratio(ppl_dyn: float, ppl_static: float) -> float:
    if not (ppl_dyn > 0 and ppl_static > 0):
        raise NonpositiveInput("perplexities must be positive")
    return (ppl_static - ppl_dyn) / ppl_static


def segmentation_overhead(t_dyn_ms: float, t_static_ms: float) -> float:
    if not (t_dyn_ms > 0 and t_static_ms > 0):
        raise NonpositiveInput("timings must be positive")
    return (t_dyn_ms - t_static_ms) / t_static_ms


def gradient_flow_variance(traces) -> float:
    """Population variance of the per-iteration mean update magnitude."""
    g = [float(getattr(t, "grad_mean", t)) for t in traces]
    if len(g) < 2:
        raise TooFewTraces("need at least two traces")
    return float(np.var(g))


def _prf(pred: set, gold: set) -> tuple[int, int, int]:
    return len(pred & gold), len(pred - gold), len(gold - pred)


def _f1_from_counts(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    if tp + fp + fn == 0:
        return 1.0, 1.0, 1.0
    p = tp / (tp + fp) if tp + fp else 1.0
    r = tp / (tp + fn) if tp + fn else 1.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def semantic_integrity_score(seg: Segmentation, gold, length: Optional[int] = None):
    """Boundary precision, recall and F1 against gold positions."""
    if isinstance(gold, Segmentation):
        if gold.length != seg.length:
            raise LengthMismatch("gold covers a different length")
        gold = gold.boundaries
    elif length is not None and length != seg.length:
        raise LengthMismatch("gold covers a different length")
    gold = set(gold)
    if any(not 0 < g < seg.length for g in gold):
        raise LengthMismatch("gold boundary outside the sequence")
    return _f1_from_counts(*_prf(set(seg.boundaries), gold))


def corpus_integrity(segs: Sequence[Segmentation], golds: Sequence) -> tuple[float, float, float]:
    """Micro-averaged boundary P/R/F1 pooled over a corpus."""
    if len(segs) != len(golds):
        raise LengthMismatch("one gold set per segmentation required")
    tp = fp = fn = 0
    for s, g in zip(segs, golds):
        a, b, c = _prf(set(s.boundaries), set(g))
        tp, fp, fn = tp + a, fp + b, fn + c
    return _f1_from_counts(tp, fp, fn)


def embedding_divergence(table_a, table_b) -> float:
    """Mean normalized angle between shared forms; forms in only one table are ignored."""
    shared = [f for f in table_a.forms if f in table_b.index]
    if not shared:
        raise NoSharedForms("tables share no token forms")
    A = table_a.vectors[[table_a.index[f] for f in shared]]
    B = table_b.vectors[[table_b.index[f] for f in shared]]
    cos = np.clip(np.sum(A * B, axis=1), -1.0, 1.0)
    return float(np.mean(np.arccos(cos)) / math.pi)


def _entropy(counter: Counter) -> float:
    n = sum(counter.values())
    return -sum(c / n * math.log(c / n) for c in counter.values() if c)


def _ranked(counter: Counter, top: int) -> list[float]:
    n = sum(counter.values())
    ordered = sorted(counter.items(), key=lambda kv: (-kv[1], kv[0]))
    return [c / n for _, c in ordered[:top]]


@dataclass
class FrequencyShift:
    rows: list[tuple[int, float, float]]
    entropy_dyn: float
    entropy_static: float


def token_frequency_shift(tokens_dyn: Iterable[Sequence[str]], tokens_static: Iterable[Sequence[str]],
                          top: int = 50) -> FrequencyShift:
    cd = Counter(t for s in tokens_dyn for t in s)
    cs = Counter(t for s in tokens_static for t in s)
    if not cd or not cs:
        raise EmptyCorpusError("both tokenizations must contain tokens")
    if sum(len(t) for t in cd.elements()) != sum(len(t) for t in cs.elements()):
        raise LengthMismatch("tokenizations cover different text")
    rd, rs = _ranked(cd, top), _ranked(cs, top)
    n = max(len(rd), len(rs))
    rd += [0.0] * (n - len(rd))
    rs += [0.0] * (n - len(rs))
    rows = [(i + 1, rd[i], rs[i]) for i in range(n)]
    return FrequencyShift(rows, _entropy(cd), _entropy(cs))


def segmentation_consistency(segs) -> float:
    """Share of final-iteration token spans present in every recorded iteration.

    ``segs`` lists one entry per iteration: either a Segmentation or a list of
    Segmentations (one per sequence of a corpus).
    """
    iters = [[s] if isinstance(s, Segmentation) else list(s) for s in segs]
    if len(iters) < 2:
        raise TooFewIterations("need at least two recorded iterations")
    final = iters[-1]
    kept = total = 0
    span_sets = [[set(s.spans()) for s in it] for it in iters[:-1]]
    for k, seg in enumerate(final):
        for sp in seg.spans():
            total += 1
            if all(sp in it[k] for it in span_sets):
                kept += 1
    if total == 0:
        raise EmptyEval("final iteration holds no tokens")
    return kept / total


# ---------------------------------------------------------------------------
# Report


def _finite(x) -> bool:
    return isinstance(x, (int, float)) and math.isfinite(x)


@dataclass
class MetricsReport:
    token_stability: float
    coherence_index: float
    ppl_dynamic: float
    ppl_static: float
    ppl_reduction_ratio: float
    grad_flow_variance: float
    semantic_integrity_f1: float
    embedding_divergence_by_step: list = field(default_factory=list)
    seg_consistency_by_domain: dict = field(default_factory=dict)
    freq_shift: list = field(default_factory=list)
    freq_entropy_dyn: float = 0.0
    freq_entropy_static: float = 0.0
    overhead_ratio: Optional[float] = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def need(ok, msg):
            if not ok:
                raise MalformedReport(msg)

        need(_finite(self.token_stability) and 0.0 <= self.token_stability <= 1.0,
             "token_stability must lie in [0, 1]")
        need(_finite(self.coherence_index) and -1.0 - 1e-9 <= self.coherence_index <= 1.0 + 1e-9,
             "coherence_index must lie in [-1, 1]")
        need(_finite(self.ppl_dynamic) and self.ppl_dynamic > 0, "ppl_dynamic must be > 0")
        need(_finite(self.ppl_static) and self.ppl_static > 0, "ppl_static must be > 0")
        need(_finite(self.ppl_reduction_ratio), "ppl_reduction_ratio must be finite")
        need(self.overhead_ratio is None or (_finite(self.overhead_ratio) and self.overhead_ratio >= -1.0),
             "overhead_ratio must be finite and > -1")
        need(_finite(self.grad_flow_variance) and self.grad_flow_variance >= 0,
             "grad_flow_variance must be >= 0")
        need(_finite(self.semantic_integrity_f1) and 0.0 <= self.semantic_integrity_f1 <= 1.0,
             "semantic_integrity_f1 must lie in [0, 1]")
        for row in self.embedding_divergence_by_step:
            need(len(row) == 3 and all(_finite(v) or v is None for v in row), "bad divergence row")
            need(all(v is None or 0.0 <= v <= 1.0 for v in row[1:]), "divergence must lie in [0, 1]")
        need([int(r[0]) for r in self.embedding_divergence_by_step]
             == list(range(1, len(self.embedding_divergence_by_step) + 1)),
             "divergence rows must be indexed by step 1..n")
        for dom, v in self.seg_consistency_by_domain.items():
            need(isinstance(dom, str) and set(v) == {"dynamic", "static"}, "bad consistency entry")
            need(all(_finite(x) and 0.0 <= x <= 1.0 for x in v.values()), "consistency must lie in [0, 1]")
        for i, row in enumerate(self.freq_shift):
            need(len(row) == 3 and int(row[0]) == i + 1, "freq_shift rows must be ranked 1..n")
            need(all(_finite(x) and 0.0 <= x <= 1.0 for x in row[1:]), "relative frequency outside [0, 1]")
        need(_finite(self.freq_entropy_dyn) and self.freq_entropy_dyn >= 0, "entropy must be >= 0")
        need(_finite(self.freq_entropy_static) and self.freq_entropy_static >= 0, "entropy must be >= 0")

    def to_json(self, include_timing: bool = True) -> dict:
        d = asdict(self)
        d["embedding_divergence_by_step"] = [list(r) for r in self.embedding_divergence_by_step]
        d["freq_shift"] = [list(r) for r in self.freq_shift]
        if not include_timing:
            d.pop("overhead_ratio")
        return d

    @classmethod
    def from_json(cls, obj) -> "MetricsReport":
        if not isinstance(obj, dict):
            raise MalformedReport("report must be a JSON object")
        names = {f.name for f in fields(cls)}
        unknown = set(obj) - names
        if unknown:
            raise MalformedReport(f"unknown report fields: {sorted(unknown)}")
        try:
            return cls(**obj)
        except TypeError as exc:
            raise MalformedReport(str(exc)) from None

    def dumps(self, include_timing: bool = True) -> str:
        return json.dumps(self.to_json(include_timing), indent=2, sort_keys=True) + "\n"


SCALAR_FIELDS = ("token_stability", "coherence_index", "ppl_dynamic", "ppl_static",
                 "ppl_reduction_ratio", "overhead_ratio", "grad_flow_variance",
                 "semantic_integrity_f1", "freq_entropy_dyn", "freq_entropy_static")


def _fmt(v) -> str:
    if v is None:
        return "nan"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    Path(path).write_text(csv_text(header, rows), encoding="utf-8")


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]
