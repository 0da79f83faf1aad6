"""End-to-end experiment plumbing: configuration, runs, ablations, benchmarks.

Everything here is deterministic given the configuration, except values that
come from wall-clock timers (kept apart in ``timing.json`` and ``overhead.csv``).
"""

from __future__ import annotations

import json
import math
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .boundary import SegConstraints, fit_boundary_model
from .bpe import encode_corpus, train_bpe
from .corpus import Corpus, RawDocument, SplitSpec, load_corpus, split
from .errors import ConfigError, EmptyBucket
from .metrics import (
    BigramLm,
    MetricsReport,
    char_perplexity,
    coherence_index,
    corpus_integrity,
    gradient_flow_variance,
    perplexity_reduction_ratio,
    segmentation_consistency,
    segmentation_overhead,
    token_frequency_shift,
    write_csv,
)
from .morphogenesis import (
    HyperParams,
    MorphoState,
    StepTrace,
    derive_seed,
    init_state,
    morphogenesis_step,
    run,
)
from .planted import PlantedSpec, planted_corpus


# ---------------------------------------------------------------------------
# Configuration


def _build(cls, obj, where: str, skip: Sequence[str] = ()):
    """Instantiate a dataclass from a dict, rejecting unknown keys."""
    if obj is None:
        obj = {}
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} must be an object")
    allowed = {f.name for f in fields(cls)} - set(skip)
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    kwargs = dict(obj)
    for k, v in kwargs.items():
        if isinstance(v, list):
            kwargs[k] = tuple(v)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass(frozen=True)
class CorpusSource:
    domain: str
    path: Optional[str] = None
    planted: Optional[PlantedSpec] = None
    lowercase: bool = False

    def load(self) -> Corpus:
        if self.planted is not None:
            return planted_corpus(self.planted, self.domain)
        return load_corpus([RawDocument.from_path(self.path, self.domain)], self.lowercase, gold=True)


@dataclass(frozen=True)
class BenchSpec:
    buckets: tuple = ((10, 20), (50, 100), (200, None))
    repetitions: int = 3
    warmup: int = 1

    def __post_init__(self):
        bs = tuple((int(lo), None if hi is None else int(hi)) for lo, hi in self.buckets)
        object.__setattr__(self, "buckets", bs)
        if not bs:
            raise ValueError("at least one bucket required")
        for lo, hi in bs:
            if lo < 1 or (hi is not None and hi < lo):
                raise ValueError(f"bad bucket {(lo, hi)}")
        ordered = sorted(bs)
        for (_, hi), (lo2, _) in zip(ordered[:-1], ordered[1:]):
            if hi is None or hi >= lo2:
                raise ValueError("buckets must not overlap")
        if self.repetitions < 3:
            raise ValueError("repetitions must be >= 3")
        if self.warmup < 0:
            raise ValueError("warmup must be >= 0")

    @staticmethod
    def label(bucket) -> str:
        lo, hi = bucket
        return f"{lo}+" if hi is None else f"{lo}-{hi}"

    def bucket_of(self, n: int):
        for lo, hi in self.buckets:
            if n >= lo and (hi is None or n <= hi):
                return (lo, hi)
        return None


@dataclass(frozen=True)
class RunConfig:
    corpora: tuple
    hyper: HyperParams = HyperParams()
    constraints: SegConstraints = SegConstraints()
    boundary_order: int = 2
    boundary_slope: float = 2.0
    bpe_merges: int = 120
    lm_k: float = 0.1
    split: SplitSpec = SplitSpec()
    freeze_segmentation: bool = False
    freeze_embeddings: bool = False
    static_divergence: bool = True
    out: str = "morphotok-out"
    formats: tuple = ("json", "csv")
    bench: BenchSpec = BenchSpec()
    seed: int = 0

    def __post_init__(self):
        if not self.corpora:
            raise ConfigError("at least one corpus is required")
        domains = [c.domain for c in self.corpora]
        if len(set(domains)) != len(domains):
            raise ConfigError("domain labels must be unique")
        if self.hyper.iterations < 2:
            raise ConfigError("iterations must be >= 2 for trend metrics")
        if self.boundary_order < 1:
            raise ConfigError("boundary_order must be >= 1")
        if not self.boundary_slope > 0:
            raise ConfigError("boundary_slope must be positive")
        if self.bpe_merges < 0:
            raise ConfigError("bpe_merges must be >= 0")
        if not self.lm_k > 0:
            raise ConfigError("lm_k must be positive")
        if not set(self.formats) <= {"json", "csv"} or not self.formats:
            raise ConfigError("formats must be a nonempty subset of {json, csv}")
        for c in self.corpora:
            if c.path is not None and not Path(c.path).is_file():
                raise ConfigError(f"corpus path not readable: {c.path}")

    @classmethod
    def from_json(cls, obj, base_dir: Optional[Path] = None, overrides: Optional[dict] = None) -> "RunConfig":
        if not isinstance(obj, dict):
            raise ConfigError("config must be a JSON object")
        obj = dict(obj)
        obj.update({k: v for k, v in (overrides or {}).items() if v is not None})
        allowed = {f.name for f in fields(cls)}
        unknown = set(obj) - allowed
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        seed = obj.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        corpora = []
        raw = obj.get("corpora")
        if not isinstance(raw, list):
            raise ConfigError("corpora must be a list")
        for i, c in enumerate(raw):
            if not isinstance(c, dict):
                raise ConfigError(f"corpora[{i}] must be an object")
            unknown = set(c) - {"domain", "path", "planted", "lowercase"}
            if unknown:
                raise ConfigError(f"unknown keys in corpora[{i}]: {sorted(unknown)}")
            if ("path" in c) == ("planted" in c):
                raise ConfigError(f"corpora[{i}] needs exactly one of 'path' or 'planted'")
            domain = c.get("domain")
            if not isinstance(domain, str) or not domain:
                raise ConfigError(f"corpora[{i}] needs a nonempty domain label")
            planted = None
            path = None
            if "planted" in c:
                p = dict(c["planted"] or {})
                p.setdefault("seed", derive_seed(seed, f"corpus:{i}") % 2**32)
                planted = _build(PlantedSpec, p, f"corpora[{i}].planted")
            else:
                path = Path(c["path"])
                if base_dir is not None and not path.is_absolute():
                    path = base_dir / path
                path = str(path)
            corpora.append(CorpusSource(domain, path, planted, bool(c.get("lowercase", False))))
        hyper = dict(obj.get("hyper") or {})
        if "seed" in hyper:
            raise ConfigError("set the seed at the top level, not in hyper")
        hyper["seed"] = derive_seed(seed, "morphogenesis")
        split_obj = dict(obj.get("split") or {})
        if "seed" in split_obj:
            raise ConfigError("set the seed at the top level, not in split")
        split_obj["seed"] = derive_seed(seed, "split") % 2**32
        out = obj.get("out", "morphotok-out")
        kw = {k: obj[k] for k in ("boundary_order", "boundary_slope", "bpe_merges", "lm_k",
                                  "freeze_segmentation", "freeze_embeddings", "static_divergence")
              if k in obj}
        formats = obj.get("formats", ["json", "csv"])
        if not isinstance(formats, list):
            raise ConfigError("formats must be a list")
        for k, v in kw.items():
            want = bool if k in ("freeze_segmentation", "freeze_embeddings", "static_divergence") else (int, float)
            if not isinstance(v, want) or (want is not bool and isinstance(v, bool)):
                raise ConfigError(f"{k} has the wrong type")
        return cls(
            corpora=tuple(corpora),
            hyper=_build(HyperParams, hyper, "hyper"),
            constraints=_build(SegConstraints, obj.get("constraints"), "constraints"),
            split=_build(SplitSpec, split_obj, "split"),
            out=str(out),
            formats=tuple(formats),
            bench=_build(BenchSpec, obj.get("bench"), "bench"),
            seed=seed,
            **kw,
        )

    @classmethod
    def load(cls, path, overrides: Optional[dict] = None) -> "RunConfig":
        path = Path(path)
        try:
            obj = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        return cls.from_json(obj, path.parent, overrides)


# ---------------------------------------------------------------------------
# Thread control


@contextmanager
def thread_limit(n: Optional[int]):
    """Cap BLAS/OpenMP pools; ``None`` or 0 leaves the defaults."""
    if not n:
        yield
        return
    with threadpool_limits(limits=n):
        yield


def env_threads() -> Optional[int]:
    raw = os.environ.get("MORPHOTOK_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError("MORPHOTOK_THREADS must be an integer") from None
    if n < 0:
        raise ConfigError("MORPHOTOK_THREADS must be >= 0")
    return n or None


# ---------------------------------------------------------------------------
# Runs


def warm_start(state: MorphoState, table) -> None:
    """Copy trained vectors into ``state`` for every form both tables know."""
    for i, f in enumerate(state.table.forms):
        v = table.get(f)
        if v is not None:
            state.table.vectors[i] = v


def dynamic_segment(sequences, model, hp: HyperParams, constraints, table=None,
                    freeze_segmentation=False, freeze_embeddings=False) -> MorphoState:
    """Segment new sequences by running the same morphogenesis from a trained table."""
    state = init_state(sequences, model, hp, constraints)
    if table is not None:
        warm_start(state, table)
    state, _ = run(sequences, model, hp, constraints, freeze_segmentation, freeze_embeddings, state=state)
    return state


@dataclass
class DomainResult:
    domain: str
    eval_units: int
    ppl_dynamic: float
    ppl_static: float
    token_stability: float
    coherence_index: float
    grad_flow_variance: float
    precision: float
    recall: float
    f1: float
    divergence_dynamic: list
    divergence_static: Optional[list]
    stability_by_iter: list
    consistency_dynamic: float
    consistency_static: float
    tokens_dynamic: list
    tokens_static: list
    traces: list
    dynamic_ms: float = 0.0
    static_ms: float = 0.0


def _tokens(state: MorphoState) -> list[list[str]]:
    return [state.tokens(k) for k in range(len(state.sequences))]


def run_domain(source: CorpusSource, cfg: RunConfig, timing: bool = True) -> DomainResult:
    corpus = source.load()
    train, held = split(corpus, cfg.split)
    hp = cfg.hyper
    vocab = train_bpe(train, cfg.bpe_merges)
    model = fit_boundary_model(train, cfg.boundary_order, cfg.boundary_slope)
    state, traces, history = run(train, model, hp, cfg.constraints, cfg.freeze_segmentation,
                                 cfg.freeze_embeddings, keep_history=True)
    static_div = None
    if cfg.static_divergence:
        _, st_traces = run(train, model, hp, cfg.constraints, True, cfg.freeze_embeddings)
        static_div = [t.embedding_divergence for t in st_traces]

    ev = dynamic_segment(held.sequences, model, hp, cfg.constraints, state.table,
                         cfg.freeze_segmentation, cfg.freeze_embeddings)
    dyn_train, dyn_eval = _tokens(state), _tokens(ev)
    bpe_train = encode_corpus(vocab, train.sequences)
    bpe_eval = encode_corpus(vocab, held.sequences)
    st_train = [s.tokens(q) for s, q in zip(bpe_train, train.sequences)]
    st_eval = [s.tokens(q) for s, q in zip(bpe_eval, held.sequences)]

    ppl_dyn = char_perplexity(BigramLm.fit(dyn_train, cfg.lm_k), dyn_eval)
    ppl_st = char_perplexity(BigramLm.fit(st_train, cfg.lm_k), st_eval)
    p, r, f = corpus_integrity(ev.segmentations, held.gold or [frozenset()] * len(held))
    res = DomainResult(
        domain=source.domain,
        eval_units=held.total_units,
        ppl_dynamic=ppl_dyn,
        ppl_static=ppl_st,
        token_stability=traces[-1].token_stability,
        coherence_index=coherence_index(state, hp.coherence_cfg),
        grad_flow_variance=gradient_flow_variance(traces),
        precision=p, recall=r, f1=f,
        divergence_dynamic=[t.embedding_divergence for t in traces],
        divergence_static=static_div,
        stability_by_iter=[t.token_stability for t in traces],
        consistency_dynamic=segmentation_consistency([h.segmentations for h in history]),
        consistency_static=segmentation_consistency([bpe_train, bpe_train]),
        tokens_dynamic=dyn_eval,
        tokens_static=st_eval,
        traces=traces,
    )
    if timing:
        res.dynamic_ms, res.static_ms = time_per_sequence(ev, vocab, held.sequences, hp)
    return res


def time_per_sequence(state: MorphoState, vocab, sequences, hp: HyperParams, repetitions: int = 3,
                      warmup: int = 1) -> tuple[float, float]:
    """Mean per-sequence ms of one morphogenesis step and of one BPE encode."""
    n = len(sequences)
    for _ in range(warmup):
        morphogenesis_step(state, hp)
        encode_corpus(vocab, sequences)
    dyn, st = [], []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        morphogenesis_step(state, hp)
        dyn.append((time.perf_counter() - t0) * 1000.0 / n)
        t0 = time.perf_counter()
        encode_corpus(vocab, sequences)
        st.append((time.perf_counter() - t0) * 1000.0 / n)
    return float(np.mean(dyn)), float(np.mean(st))


def _weighted(results: Sequence[DomainResult], attr: str) -> float:
    w = np.array([r.eval_units for r in results], dtype=float)
    v = np.array([getattr(r, attr) for r in results], dtype=float)
    return float(np.sum(w * v) / np.sum(w))


def _mean_rows(rows: Sequence[Optional[list]]) -> Optional[list]:
    if any(r is None for r in rows):
        return None
    return [float(np.mean(col)) for col in zip(*rows)]


def assemble_report(results: Sequence[DomainResult]) -> MetricsReport:
    units = [r.eval_units for r in results]
    # Pool the per-unit log-likelihoods across domains.
    ppl_dyn = math.exp(sum(math.log(r.ppl_dynamic) * u for r, u in zip(results, units)) / sum(units))
    ppl_st = math.exp(sum(math.log(r.ppl_static) * u for r, u in zip(results, units)) / sum(units))
    div_dyn = _mean_rows([r.divergence_dynamic for r in results])
    div_st = _mean_rows([r.divergence_static for r in results])
    div_rows = [[i + 1, d, None if div_st is None else div_st[i]] for i, d in enumerate(div_dyn)]
    fs = token_frequency_shift([t for r in results for t in r.tokens_dynamic],
                               [t for r in results for t in r.tokens_static])
    return MetricsReport(
        token_stability=_weighted(results, "token_stability"),
        coherence_index=_weighted(results, "coherence_index"),
        ppl_dynamic=ppl_dyn,
        ppl_static=ppl_st,
        ppl_reduction_ratio=perplexity_reduction_ratio(ppl_dyn, ppl_st),
        grad_flow_variance=_weighted(results, "grad_flow_variance"),
        semantic_integrity_f1=_weighted(results, "f1"),
        embedding_divergence_by_step=div_rows,
        seg_consistency_by_domain={r.domain: {"dynamic": r.consistency_dynamic,
                                              "static": r.consistency_static} for r in results},
        freq_shift=[list(row) for row in fs.rows],
        freq_entropy_dyn=fs.entropy_dyn,
        freq_entropy_static=fs.entropy_static,
    )


def timing_summary(results: Sequence[DomainResult]) -> dict:
    dyn = float(np.mean([r.dynamic_ms for r in results]))
    st = float(np.mean([r.static_ms for r in results]))
    return {
        "overhead_ratio": segmentation_overhead(dyn, st),
        "dynamic_ms_per_sequence": dyn,
        "static_ms_per_sequence": st,
        "dynamic_cost": "one morphogenesis step over the eval split, amortized per sequence",
        "by_domain": {r.domain: {"dynamic_ms": r.dynamic_ms, "static_ms": r.static_ms} for r in results},
    }


class OutputDir:
    """Tracks written files so a failed command can remove its partial output."""

    def __init__(self, path):
        self.path = Path(path)
        self.created_dir = not self.path.exists()
        self.written: list[Path] = []

    def __enter__(self):
        self.path.mkdir(parents=True, exist_ok=True)
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            self.cleanup()
        return False

    def file(self, name: str) -> Path:
        p = self.path / name
        self.written.append(p)
        return p

    def text(self, name: str, content: str) -> Path:
        p = self.file(name)
        p.write_text(content, encoding="utf-8")
        return p

    def csv(self, name: str, header, rows) -> Path:
        p = self.file(name)
        write_csv(p, header, rows)
        return p

    def cleanup(self) -> None:
        for p in self.written:
            try:
                p.unlink()
            except FileNotFoundError:
                pass
        if self.created_dir:
            try:
                self.path.rmdir()
            except OSError:
                pass


def _safe(label: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in label)


def write_run_outputs(out: OutputDir, cfg: RunConfig, results, report: MetricsReport, timing: dict) -> None:
    if "json" in cfg.formats:
        out.text("report.json", report.dumps(include_timing=False))
        out.text("timing.json", json.dumps(timing, indent=2, sort_keys=True) + "\n")
    if "csv" in cfg.formats:
        rows = [(k, getattr(report, k)) for k in ("token_stability", "coherence_index", "ppl_dynamic",
                                                  "ppl_static", "ppl_reduction_ratio", "grad_flow_variance",
                                                  "semantic_integrity_f1", "freq_entropy_dyn",
                                                  "freq_entropy_static")]
        out.csv("report.csv", ("metric", "value"), rows)
        out.csv("ppl.csv", ("corpus", "dynamic", "static"),
                [(r.domain, r.ppl_dynamic, r.ppl_static) for r in results])
        out.csv("divergence.csv", ("step", "dynamic", "static"), report.embedding_divergence_by_step)
        stab = _mean_rows([r.stability_by_iter for r in results])
        out.csv("figure1_stability.csv", ("iter", "score"), [(i + 1, s) for i, s in enumerate(stab)])
        out.csv("figure3_freq.csv", ("rank", "dyn", "static"), report.freq_shift)
        out.csv("figure4_consistency.csv", ("domain", "dynamic", "static"),
                [(d, v["dynamic"], v["static"]) for d, v in report.seg_consistency_by_domain.items()])
        for r in results:
            out.csv(f"trace_{_safe(r.domain)}.csv", StepTrace.CSV_COLUMNS, [t.csv_row() for t in r.traces])


def execute_run(cfg: RunConfig, timing: bool = True):
    results = [run_domain(src, cfg, timing) for src in cfg.corpora]
    report = assemble_report(results)
    tsum = timing_summary(results) if timing else {}
    if timing:
        report.overhead_ratio = tsum["overhead_ratio"]
    return results, report, tsum


# ---------------------------------------------------------------------------
# Ablation


ABLATION_VARIANTS = (
    ("full", False, False),
    ("freeze_segmentation", True, False),
    ("freeze_embeddings", False, True),
)


def execute_ablation(cfg: RunConfig) -> list[tuple]:
    """Rows (variant, domain, iter, boundary_variance, stability) for the three variants."""
    rows = []
    for src in cfg.corpora:
        train, _ = split(src.load(), cfg.split)
        model = fit_boundary_model(train, cfg.boundary_order, cfg.boundary_slope)
        for name, fs, fe in ABLATION_VARIANTS:
            _, traces = run(train, model, cfg.hyper, cfg.constraints,
                            fs or cfg.freeze_segmentation, fe or cfg.freeze_embeddings)
            rows.extend((name, src.domain, t.iteration, t.boundary_variance, t.token_stability)
                        for t in traces)
    return rows


def late_variance(rows, variant: str, last: int = 5) -> float:
    vals = [r[3] for r in rows if r[0] == variant]
    return float(np.mean(vals[-last:]))


# ---------------------------------------------------------------------------
# Benchmark


def execute_bench(cfg: RunConfig, spec: Optional[BenchSpec] = None) -> list[tuple]:
    """Rows (bucket, dynamic_ms, static_ms, overhead), single-threaded, compute only."""
    spec = spec or cfg.bench
    corpora = [src.load() for src in cfg.corpora]
    by_bucket: dict = {b: [] for b in spec.buckets}
    for c in corpora:
        for s in c.sequences:
            b = spec.bucket_of(len(s))
            if b is not None:
                by_bucket[b].append(s)
    for b, seqs in by_bucket.items():
        if not seqs:
            raise EmptyBucket(f"no sequences of length {BenchSpec.label(b)}")
    pooled = Corpus([s for c in corpora for s in c.sequences], "bench")
    vocab = train_bpe(pooled, cfg.bpe_merges)
    model = fit_boundary_model(pooled, cfg.boundary_order, cfg.boundary_slope)
    rows = []
    with thread_limit(1):
        for b in spec.buckets:
            seqs = by_bucket[b]
            state = init_state(seqs, model, cfg.hyper, cfg.constraints)
            dyn, st = time_per_sequence(state, vocab, seqs, cfg.hyper, spec.repetitions, spec.warmup)
            rows.append((BenchSpec.label(b), dyn, st, segmentation_overhead(dyn, st)))
    return rows
