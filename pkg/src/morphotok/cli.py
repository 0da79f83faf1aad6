"""``morphotok run|ablate|bench|report`` command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from .errors import ConfigError, MalformedReport, MissingReport, MorphotokError
from .metrics import MetricsReport
from .pipeline import (
    OutputDir,
    RunConfig,
    env_threads,
    execute_ablation,
    execute_bench,
    execute_run,
    thread_limit,
    write_run_outputs,
)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

REPORT_ROWS = (
    ("Token Stability Score", "token_stability"),
    ("Contextual Coherence Index", "coherence_index"),
    ("Perplexity (dynamic, per unit)", "ppl_dynamic"),
    ("Perplexity (static BPE, per unit)", "ppl_static"),
    ("Perplexity Reduction Ratio", "ppl_reduction_ratio"),
    ("Segmentation Overhead", "overhead_ratio"),
    ("Gradient Flow Variance", "grad_flow_variance"),
    ("Semantic Integrity F1", "semantic_integrity_f1"),
    ("Token Entropy (dynamic)", "freq_entropy_dyn"),
    ("Token Entropy (static)", "freq_entropy_static"),
)


def _load_config(args) -> RunConfig:
    overrides = {"seed": args.seed, "out": args.out}
    if args.freeze_segmentation:
        overrides["freeze_segmentation"] = True
    if args.freeze_embeddings:
        overrides["freeze_embeddings"] = True
    return RunConfig.load(args.config, overrides)


def cmd_run(cfg: RunConfig) -> int:
    with OutputDir(cfg.out) as out:
        results, report, timing = execute_run(cfg)
        write_run_outputs(out, cfg, results, report, timing)
    print(f"wrote {len(out.written)} files to {out.path}")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig) -> int:
    with OutputDir(cfg.out) as out:
        rows = execute_ablation(cfg)
        out.csv("ablation.csv", ("variant", "domain", "iter", "boundary_variance", "stability"), rows)
    print(f"wrote {out.path / 'ablation.csv'}")
    return EXIT_OK


def cmd_bench(cfg: RunConfig) -> int:
    with OutputDir(cfg.out) as out:
        rows = execute_bench(cfg)
        out.csv("overhead.csv", ("bucket", "dynamic_ms", "static_ms", "overhead"), rows)
        meta = {
            "dynamic": "one morphogenesis step over all bucket sequences, amortized per sequence",
            "static": f"BPE encode with {cfg.bpe_merges} merges",
            "threads": 1,
            "repetitions": cfg.bench.repetitions,
            "warmup": cfg.bench.warmup,
        }
        out.text("bench_meta.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
    for r in rows:
        print(f"{r[0]:>10}  dynamic {r[1]:8.4f} ms  static {r[2]:8.4f} ms  overhead {r[3]:+.3f}")
    return EXIT_OK


def load_report(run_dir) -> MetricsReport:
    run_dir = Path(run_dir)
    path = run_dir / "report.json"
    if not path.is_file():
        raise MissingReport(f"no report.json in {run_dir}")
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MalformedReport(f"report.json is not valid JSON: {exc}") from None
    timing = run_dir / "timing.json"
    if timing.is_file() and isinstance(obj, dict):
        try:
            t = json.loads(timing.read_text(encoding="utf-8"))
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise MalformedReport(f"timing.json is not valid JSON: {exc}") from None
        if isinstance(t, dict) and "overhead_ratio" in t:
            obj["overhead_ratio"] = t["overhead_ratio"]
    return MetricsReport.from_json(obj)


def format_report(report: MetricsReport) -> str:
    lines = [f"{'metric':<36}{'field':<24}{'value':>14}", "-" * 74]
    for label, key in REPORT_ROWS:
        v = getattr(report, key)
        shown = "n/a" if v is None else f"{v:.6f}"
        lines.append(f"{label:<36}{key:<24}{shown:>14}")
    lines.append(f"{'Embedding divergence (final step)':<36}{'embedding_divergence':<24}"
                 f"{report.embedding_divergence_by_step[-1][1] if report.embedding_divergence_by_step else float('nan'):>14.6f}")
    for dom, v in sorted(report.seg_consistency_by_domain.items()):
        lines.append(f"{'Segmentation consistency':<36}{dom[:23]:<24}"
                     f"{v['dynamic']:>7.3f}/{v['static']:.3f}")
    return "\n".join(lines)


def cmd_report(run_dir) -> int:
    print(format_report(load_report(run_dir)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="morphotok", description="Self-organizing tokenization experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("run", "full pipeline and metrics report"),
                        ("ablate", "full vs frozen-segmentation vs frozen-embedding runs"),
                        ("bench", "per-sequence timing against the BPE baseline")):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", required=True, help="JSON run configuration")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None, help="output directory (overrides config)")
        sp.add_argument("--freeze-segmentation", action="store_true")
        sp.add_argument("--freeze-embeddings", action="store_true")
    rp = sub.add_parser("report", help="print a summary of a run directory")
    rp.add_argument("run_dir", nargs="?", default=None)
    rp.add_argument("--config", default=None, help="read the run directory from this config's 'out'")
    rp.add_argument("--out", default=None, help="run directory")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            run_dir = args.run_dir or args.out
            if run_dir is None and args.config:
                run_dir = RunConfig.load(args.config).out
            if run_dir is None:
                raise ConfigError("report needs a run directory")
            return cmd_report(run_dir)
        cfg = _load_config(args)
        threads = env_threads()
        with thread_limit(threads):
            return {"run": cmd_run, "ablate": cmd_ablate, "bench": cmd_bench}[args.command](cfg)
    except ConfigError as exc:
        print(f"morphotok: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MorphotokError, OSError, ValueError) as exc:
        print(f"morphotok: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
