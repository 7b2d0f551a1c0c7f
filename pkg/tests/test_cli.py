import json
import subprocess
import sys

import pytest

from recheck.backend import Fixture, FixtureEntry, ScriptedBackend
from recheck.cli import main
from recheck.demo import CURATION_EXPECTED, demo_curation_entries, solution_text, write_demo_data, write_problems
from recheck.engine import EngineConfig, Problem, read_traces, run_session, write_traces

from sessions import scripted_session


def run(*argv):
    return main([str(a) for a in argv])


class TestCurate:
    def test_demo(self, demo_dir, tmp_path, capsys):
        out, manifest = tmp_path / "train.jsonl", tmp_path / "manifest.json"
        code = run("curate", "--backend", "scripted", "--fixture", demo_dir / "curation_fixture.jsonl",
                   "--problems", demo_dir / "curation_problems.jsonl", "--direct", demo_dir / "curation_direct.jsonl",
                   "--out", out, "--manifest", manifest)
        assert code == 0
        m = json.loads(manifest.read_text())
        expected = {d: list(CURATION_EXPECTED.values()).count(d)
                    for d in ("KeptCorrectPath", "KeptRefinedPath", "Discarded")}
        assert m["dispositions"] == expected
        kept = expected["KeptCorrectPath"] + expected["KeptRefinedPath"]
        assert (m["direct_count"], m["critique_count"], m["total"]) == (2, kept, 2 + kept)
        assert len(out.read_text().splitlines()) == m["total"]
        assert "difficulty filter kept 4 of 5" in capsys.readouterr().out

    def test_skip_filter(self, demo_dir, tmp_path, capsys):
        fixture = tmp_path / "fx.jsonl"
        Fixture(demo_curation_entries(with_filter=False)).dump(fixture)
        pool = tmp_path / "pool.jsonl"
        lines = (demo_dir / "curation_problems.jsonl").read_text().splitlines()[:4]
        pool.write_text("\n".join(lines) + "\n")
        code = run("curate", "--backend", "scripted", "--fixture", fixture, "--problems", pool,
                   "--out", tmp_path / "o.jsonl", "--skip-filter")
        assert code == 0
        m = json.loads((tmp_path / "o.jsonl.manifest.json").read_text())
        assert sum(m["dispositions"].values()) == 4
        assert "difficulty filter" not in capsys.readouterr().out

    def test_empty_pool(self, tmp_path, capsys):
        empty = tmp_path / "empty.jsonl"
        empty.write_text("")
        fx = tmp_path / "fx.jsonl"
        fx.write_text("")
        code = run("curate", "--backend", "scripted", "--fixture", fx, "--problems", empty, "--out", tmp_path / "o")
        assert code == 1
        assert "empty pool" in capsys.readouterr().err
        assert not (tmp_path / "o").exists()


class TestInfer:
    def test_max_rounds_zero(self, demo_dir, tmp_path):
        out = tmp_path / "t.jsonl"
        code = run("infer", "--backend", "scripted", "--fixture", demo_dir / "benchmark_fixture.jsonl",
                   "--problems", demo_dir / "benchmark_problems.jsonl", "--out", out, "--max-rounds", 0)
        assert code == 0
        traces = read_traces(out)
        assert len(traces) == 10 and all(len(t.rounds) == 1 for t in traces)

    def test_max_rounds_three_matches_expectation(self, tmp_path):
        patterns = [("Incorrect", "Incorrect", "Incorrect"), ("Correct",), ("Unparseable", "Correct")]
        problems, entries, expected = [], [], []
        for i, pattern in enumerate(patterns):
            problem, backend, _ = scripted_session(f"s{i}", pattern)
            problems.append(problem)
            entries += backend.fixture.entries
            expected.append(run_session(problem, EngineConfig(max_rounds=3),
                                        ScriptedBackend(backend.fixture.entries)))
        fixture, pfile = tmp_path / "fx.jsonl", tmp_path / "p.jsonl"
        Fixture(entries).dump(fixture)
        write_problems(pfile, problems)
        write_traces(tmp_path / "expected.jsonl", expected)
        assert run("infer", "--backend", "scripted", "--fixture", fixture, "--problems", pfile,
                   "--out", tmp_path / "got.jsonl", "--max-rounds", 3) == 0
        assert (tmp_path / "got.jsonl").read_bytes() == (tmp_path / "expected.jsonl").read_bytes()

    def test_deterministic(self, demo_dir, tmp_path):
        outs = []
        for name in ("a.jsonl", "b.jsonl"):
            assert run("infer", "--backend", "scripted", "--seed", 7, "--fixture",
                       demo_dir / "benchmark_fixture.jsonl", "--problems", demo_dir / "benchmark_problems.jsonl",
                       "--out", tmp_path / name, "--max-rounds", 1) == 0
            outs.append((tmp_path / name).read_bytes())
        assert outs[0] == outs[1]

    def test_live_without_base_url(self, demo_dir, tmp_path, monkeypatch, capsys):
        monkeypatch.delenv("DC_BASE_URL", raising=False)
        code = run("infer", "--backend", "live", "--problems", demo_dir / "benchmark_problems.jsonl",
                   "--out", tmp_path / "t.jsonl")
        assert code == 1
        assert "DC_BASE_URL" in capsys.readouterr().err
        assert not (tmp_path / "t.jsonl").exists()

    def test_exhausted_fixture_is_runtime_error(self, tmp_path):
        pfile, fx = tmp_path / "p.jsonl", tmp_path / "fx.jsonl"
        write_problems(pfile, [Problem("p", "q?", "1")])
        Fixture([FixtureEntry(None, solution_text("t", "1"))]).dump(fx)
        assert run("infer", "--backend", "scripted", "--fixture", fx, "--problems", pfile,
                   "--out", tmp_path / "t.jsonl", "--max-rounds", 1) == 2

    def test_bad_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["infer", "--nope"])
        assert exc.value.code == 1


class TestEval:
    def test_sixteen_samples(self, tmp_path, capsys):
        pfile, fx = tmp_path / "p.jsonl", tmp_path / "fx.jsonl"
        write_problems(pfile, [Problem("p", "2+2?", "4")])
        Fixture([FixtureEntry(None, solution_text("t", "4"))] * 16).dump(fx)
        out = tmp_path / "eval"
        assert run("eval", "--backend", "scripted", "--fixture", fx, "--problems", pfile,
                   "--out-dir", out, "--samples", 16, "--max-rounds", 0) == 0
        assert len((out / "traces.jsonl").read_text().splitlines()) == 16
        assert json.loads((out / "report.json").read_text())["pass_at_1"] == 1.0
        assert (out / "per_round.csv").exists() and (out / "run.meta.json").exists()

    def test_demo_report(self, demo_dir, tmp_path, capsys):
        assert run("eval", "--backend", "scripted", "--fixture", demo_dir / "benchmark_fixture.jsonl",
                   "--problems", demo_dir / "benchmark_problems.jsonl", "--out-dir", tmp_path,
                   "--samples", 1, "--max-rounds", 1) == 0
        assert "per_round_accuracy {0: 0.40, 1: 0.70}" in capsys.readouterr().out


class TestProbe:
    def _setup(self, tmp_path, response):
        pfile, fx = tmp_path / "p.jsonl", tmp_path / "fx.jsonl"
        write_problems(pfile, [Problem(f"p{i}", "2+2?", "4") for i in range(3)])
        entries = []
        for _ in range(3):
            entries += [FixtureEntry(None, solution_text("t", "4")), FixtureEntry(None, response)]
        Fixture(entries).dump(fx)
        return pfile, fx

    def test_no_conclusion(self, tmp_path, capsys):
        pfile, fx = self._setup(tmp_path, "Let me just solve it again. \\boxed{4}")
        out = tmp_path / "probe.jsonl"
        assert run("probe", "--backend", "scripted", "--fixture", fx, "--problems", pfile, "--out", out) == 0
        text = capsys.readouterr().out
        assert "follow-format rate: 0.0000" in text and "informativeness rate: 0.0000" in text
        assert len(out.read_text().splitlines()) == 3

    def test_with_conclusion(self, tmp_path, capsys):
        pfile, fx = self._setup(tmp_path, "Step 1 is correct.\nConclusion: right [END]")
        assert run("probe", "--backend", "scripted", "--fixture", fx, "--problems", pfile) == 0
        assert "informativeness rate: 1.0000" in capsys.readouterr().out


class TestReport:
    def test_from_traces(self, demo_dir, tmp_path, capsys):
        traces = tmp_path / "t.jsonl"
        run("infer", "--backend", "scripted", "--fixture", demo_dir / "benchmark_fixture.jsonl",
            "--problems", demo_dir / "benchmark_problems.jsonl", "--out", traces, "--max-rounds", 1)
        before = traces.read_bytes()
        capsys.readouterr()
        assert run("report", "--traces", traces, "--problems", demo_dir / "benchmark_problems.jsonl",
                   "--out-dir", tmp_path / "rep") == 0
        assert "per_round_accuracy {0: 0.40, 1: 0.70}" in capsys.readouterr().out
        assert traces.read_bytes() == before
        assert (tmp_path / "rep" / "report.json").exists()

    def test_unknown_problem(self, demo_dir, tmp_path, capsys):
        traces = tmp_path / "t.jsonl"
        problem, backend, _ = scripted_session("zzz", ())
        write_traces(traces, [run_session(problem, EngineConfig(max_rounds=0), backend)])
        assert run("report", "--traces", traces, "--problems", demo_dir / "benchmark_problems.jsonl") == 1


class TestConfig:
    def test_yaml_config(self, demo_dir, tmp_path, monkeypatch):
        monkeypatch.setenv("FIXTURE_PATH", str(demo_dir / "benchmark_fixture.jsonl"))
        cfg = tmp_path / "run.yaml"
        cfg.write_text("backend:\n  kind: scripted\n  fixture: ${FIXTURE_PATH}\nengine:\n  max_rounds: 1\nseed: 7\n")
        out = tmp_path / "t.jsonl"
        assert run("infer", "--config", cfg, "--problems", demo_dir / "benchmark_problems.jsonl", "--out", out) == 0
        meta = json.loads((tmp_path / "t.jsonl.meta.json").read_text())
        assert meta["seed"] == 7 and meta["max_rounds"] == 1

    def test_summary_role_from_config(self, tmp_path):
        from recheck.config import ConfigError, RunConfig

        cfg = RunConfig.from_dict({"engine": {"summary_role": "assistant"}})
        assert cfg.engine_config().summary_role == "assistant"
        bad = RunConfig.from_dict({"backend": {"kind": "scripted", "fixture": str(tmp_path)},
                                   "engine": {"summary_role": "system"}})
        with pytest.raises(ConfigError):
            bad.validate()

    def test_unknown_key(self, demo_dir, tmp_path, capsys):
        cfg = tmp_path / "run.yaml"
        cfg.write_text("engine:\n  rounds: 2\n")
        assert run("infer", "--config", cfg, "--problems", demo_dir / "benchmark_problems.jsonl",
                   "--out", tmp_path / "t") == 1
        assert "rounds" in capsys.readouterr().err


def test_bundled_demo_data_is_current(tmp_path):
    from recheck.demo import DATA_DIR

    for path in write_demo_data(tmp_path):
        assert path.read_bytes() == (DATA_DIR / path.name).read_bytes(), path.name


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "recheck", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "curate" in proc.stdout
