import json
from pathlib import Path

import pytest

from morphotok import cli, pipeline
from morphotok.corpus import Corpus
from morphotok.errors import ConfigError
from morphotok.metrics import MetricsReport, read_csv
from morphotok.pipeline import ABLATION_VARIANTS, BenchSpec, RunConfig

SMALL = {
    "seed": 5,
    "corpora": [{"domain": "planted", "planted": {"min_units": 2500}}],
    "hyper": {"iterations": 3},
    "bpe_merges": 40,
}

HEADERS = {
    "report.csv": ["metric", "value"],
    "ppl.csv": ["corpus", "dynamic", "static"],
    "divergence.csv": ["step", "dynamic", "static"],
    "figure1_stability.csv": ["iter", "score"],
    "figure3_freq.csv": ["rank", "dyn", "static"],
    "figure4_consistency.csv": ["domain", "dynamic", "static"],
    "trace_planted.csv": ["iter", "stability", "coherence", "align_loss", "emb_divergence",
                          "grad_mean", "grad_var", "ms"],
}


def write_cfg(tmp_path, **kw):
    obj = json.loads(json.dumps(SMALL))
    obj.update(kw)
    obj.setdefault("out", str(tmp_path / "out"))
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(obj))
    return p


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("run")
    assert cli.main(["run", "--config", str(write_cfg(tmp))]) == 0
    return tmp / "out"


def test_run_writes_expected_csvs(run_dir):
    for name, header in HEADERS.items():
        head, rows = read_csv(run_dir / name)
        assert head == header
        assert rows
        for r in rows:
            assert len(r) == len(header)
            for v in r[1:]:
                if v != "nan":
                    float(v)
    _, trace = read_csv(run_dir / "trace_planted.csv")
    assert [int(r[0]) for r in trace] == [1, 2, 3]


def test_report_json_valid_and_timing_separate(run_dir):
    obj = json.loads((run_dir / "report.json").read_text())
    assert "overhead_ratio" not in obj
    MetricsReport.from_json(obj)
    assert "overhead_ratio" in json.loads((run_dir / "timing.json").read_text())
    assert cli.load_report(run_dir).overhead_ratio is not None


def test_report_command_prints_fields(run_dir, capsys):
    assert cli.main(["report", str(run_dir)]) == 0
    text = capsys.readouterr().out
    for _, key in cli.REPORT_ROWS:
        assert key in text


def test_report_missing_and_malformed(tmp_path, capsys):
    assert cli.main(["report", str(tmp_path)]) == 2
    (tmp_path / "report.json").write_text('{"token_stab')
    assert cli.main(["report", str(tmp_path)]) == 2
    (tmp_path / "report.json").write_text('{"token_stability": 3.0}')
    assert cli.main(["report", str(tmp_path)]) == 2
    assert "error" in capsys.readouterr().err


def test_missing_corpus_path_is_config_error(tmp_path):
    cfg = write_cfg(tmp_path, corpora=[{"domain": "x", "path": "nope.json"}])
    assert cli.main(["run", "--config", str(cfg)]) == 1


def test_unknown_keys_rejected(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.from_json({**SMALL, "colour": 1})
    with pytest.raises(ConfigError):
        RunConfig.from_json({**SMALL, "hyper": {"iterations": 3, "tempo": 2}})
    with pytest.raises(ConfigError):
        RunConfig.from_json({**SMALL, "hyper": {"iterations": 3, "seed": 2}})
    assert cli.main(["run", "--config", str(write_cfg(tmp_path, colour=1))]) == 1


def test_config_relative_path_and_seed_override(tmp_path):
    Corpus(["abab cd", "cd abab"], "toy").save(tmp_path / "toy.json")
    cfg = RunConfig.load(write_cfg(tmp_path, corpora=[{"domain": "toy", "path": "toy.json"}]),
                         {"seed": 9})
    assert Path(cfg.corpora[0].path) == tmp_path / "toy.json"
    assert cfg.seed == 9
    other = RunConfig.from_json({**SMALL, "seed": 10})
    assert cfg.hyper.seed != other.hyper.seed


def test_failed_run_removes_partial_output(tmp_path, monkeypatch):
    out = tmp_path / "fresh"
    real = pipeline.OutputDir.csv

    def boom(self, name, header, rows):
        if name == "divergence.csv":
            raise OSError("disk full")
        return real(self, name, header, rows)

    monkeypatch.setattr(pipeline.OutputDir, "csv", boom)
    assert cli.main(["run", "--config", str(write_cfg(tmp_path, out=str(out)))]) == 2
    assert not out.exists()


def test_bad_thread_env(tmp_path, monkeypatch):
    monkeypatch.setenv("MORPHOTOK_THREADS", "many")
    assert cli.main(["run", "--config", str(write_cfg(tmp_path))]) == 1


def test_ablate_variants_and_frozen_stability(tmp_path):
    assert cli.main(["ablate", "--config", str(write_cfg(tmp_path))]) == 0
    head, rows = read_csv(tmp_path / "out" / "ablation.csv")
    assert head == ["variant", "domain", "iter", "boundary_variance", "stability"]
    assert {r[0] for r in rows} == {v[0] for v in ABLATION_VARIANTS}
    assert len(rows) == 3 * 3

    both = tmp_path / "both"
    assert cli.main(["run", "--config", str(write_cfg(tmp_path)), "--out", str(both),
                     "--freeze-segmentation", "--freeze-embeddings"]) == 0
    _, stab = read_csv(both / "figure1_stability.csv")
    assert all(float(r[1]) == 0.0 for r in stab)


def test_bench_schema(tmp_path):
    cfg = write_cfg(tmp_path, corpora=[{"domain": "a", "planted": {"min_units": 800, "words_per_line": [3, 5]}},
                                       {"domain": "b", "planted": {"min_units": 2000, "words_per_line": [16, 26]}}],
                    bench={"buckets": [[10, 20], [50, 100]], "repetitions": 3, "warmup": 0})
    assert cli.main(["bench", "--config", str(cfg)]) == 0
    head, rows = read_csv(tmp_path / "out" / "overhead.csv")
    assert head == ["bucket", "dynamic_ms", "static_ms", "overhead"]
    assert [r[0] for r in rows] == ["10-20", "50-100"]
    for r in rows:
        assert float(r[1]) > 0 and float(r[2]) > 0
        assert float(r[3]) == pytest.approx(float(r[1]) / float(r[2]) - 1)
    meta = json.loads((tmp_path / "out" / "bench_meta.json").read_text())
    assert meta["threads"] == 1


def test_bench_spec_validation():
    with pytest.raises(ValueError):
        BenchSpec(buckets=((10, 30), (20, 40)))
    with pytest.raises(ValueError):
        BenchSpec(repetitions=2)
    with pytest.raises(ConfigError):
        RunConfig.from_json({**SMALL, "bench": {"repetitions": 2}})
    spec = BenchSpec()
    assert spec.bucket_of(15) == (10, 20)
    assert spec.bucket_of(30) is None
    assert spec.bucket_of(5000) == (200, None)
