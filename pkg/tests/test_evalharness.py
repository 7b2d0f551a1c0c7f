import itertools
import json
from fractions import Fraction

import pytest

from recheck.backend import Fixture, FixtureEntry, ScriptedBackend, TokenUsage
from recheck.demo import DATA_DIR, critique_text, demo_benchmark_entries, demo_benchmark_problems, solution_text
from recheck.engine import EngineConfig, Problem, ProbeJudgment, ProbeResult, Round, SessionTrace
from recheck.evalharness import (
    BenchmarkSpec,
    DomainError,
    answer_at_round,
    format_table,
    informativeness_rate,
    pass_at_k,
    run_benchmark,
    token_report,
    write_report,
)
from recheck.textproto import Critique, Judgment

from sessions import all_patterns, scripted_session
from recheck.engine import run_session


def enumerate_pass_at_k(n, c, k) -> Fraction:
    """Fraction of size-k subsets of n samples (c correct) holding at least one correct sample."""
    samples = [True] * c + [False] * (n - c)
    subsets = list(itertools.combinations(range(n), k))
    return Fraction(sum(any(samples[i] for i in s) for s in subsets), len(subsets))


class TestPassAtK:
    @pytest.mark.parametrize("n, c, k, expected", [(16, 16, 1, 1.0), (16, 9, 1, 0.5625), (5, 2, 2, 0.7)])
    def test_examples(self, n, c, k, expected):
        assert pass_at_k(n, c, k) == pytest.approx(expected, abs=1e-12)

    def test_exact_c_over_n(self):
        assert pass_at_k(16, 9, 1) == 0.5625

    def test_enumeration(self):
        for n in range(1, 9):
            for c in range(n + 1):
                for k in range(1, n + 1):
                    assert abs(pass_at_k(n, c, k) - float(enumerate_pass_at_k(n, c, k))) <= 1e-12

    @pytest.mark.parametrize("n, c, k", [(4, 5, 1), (4, -1, 1), (4, 2, 0), (4, 2, 5)])
    def test_domain(self, n, c, k):
        with pytest.raises(DomainError):
            pass_at_k(n, c, k)

    def test_large_n(self):
        assert 0.0 < pass_at_k(10_000, 3, 100) < 1.0


def trace_with_tokens(*tokens):
    rounds = [Round(0, "t", "s", "1", TokenUsage(0, tokens[0]))]
    rounds += [Round(i, "t", "s", "1", TokenUsage(0, t), Critique("a", "b", Judgment.INCORRECT))
               for i, t in enumerate(tokens[1:], 1)]
    return SessionTrace("p", tuple(rounds), False, len(rounds) - 1, "1")


class TestTokenReport:
    def test_single(self):
        avg, cum = token_report([trace_with_tokens(100, 40, 20)])
        assert avg == {0: 100, 1: 40, 2: 20} and cum == {0: 100, 1: 140, 2: 160}

    def test_reach_conditioned(self):
        avg, cum = token_report([trace_with_tokens(100), trace_with_tokens(100, 40)])
        assert avg[1] == 40 and cum[1] == 120

    def test_no_key_beyond_rounds(self):
        avg, cum = token_report([trace_with_tokens(5, 5)])
        assert max(avg) == 1 and max(cum) == 1


class TestInformativeness:
    def _results(self, flags):
        return [ProbeResult("p", True, ProbeJudgment.RIGHT, f) for f in flags]

    def test_examples(self):
        assert informativeness_rate(self._results([False] * 5)) == 0.0
        assert informativeness_rate(self._results([True] * 17 + [False] * 183)) == 0.085
        assert informativeness_rate(self._results([True])) == 1.0

    def test_empty(self):
        with pytest.raises(ValueError):
            informativeness_rate([])


class TestAnswerAtRound:
    @pytest.mark.parametrize("n, pattern", [(n, p) for n, p in all_patterns(3) if n == 3])
    def test_matches_capped_run(self, n, pattern):
        problem, backend, _ = scripted_session("x", pattern)
        full = run_session(problem, EngineConfig(max_rounds=3), backend)
        for r in range(4):
            problem, backend, _ = scripted_session("x", pattern[:r])
            capped = run_session(problem, EngineConfig(max_rounds=r), backend)
            assert answer_at_round(full, r) == capped.final_answer


class TestBenchmark:
    def test_demo(self, tmp_path):
        spec = BenchmarkSpec("demo", demo_benchmark_problems(), 1, EngineConfig(max_rounds=1))
        report, results = run_benchmark(spec, ScriptedBackend(demo_benchmark_entries()))
        assert report.per_round_accuracy == {0: 0.4, 1: 0.7}
        assert report.pass_at_1 == pytest.approx(0.7)
        assert report.early_stop_rate == pytest.approx(0.4)
        assert report.tokens_avg_per_round[1] < report.tokens_avg_per_round[0]
        assert "per_round_accuracy {0: 0.40, 1: 0.70}" in format_table(report)
        paths = write_report(report, tmp_path)
        assert json.loads(paths["json"].read_text())["per_round_accuracy"] == {"0": 0.4, "1": 0.7}
        assert paths["csv"].read_text().splitlines()[0] == "round,accuracy,avg_tokens,cumulative_tokens"

    def test_bundled_fixture_matches(self):
        assert Fixture.load(DATA_DIR / "benchmark_fixture.jsonl").entries == demo_benchmark_entries()

    def test_identical_samples(self):
        p = Problem("p", "2+2?", "4")
        fx = Fixture([FixtureEntry(None, solution_text("t", "5"))] * 16)
        report, results = run_benchmark(BenchmarkSpec("b", [p], 16, EngineConfig(max_rounds=0)), ScriptedBackend(fx))
        assert len(results) == 16 and report.pass_at_1 == 0.0
        fx = Fixture([FixtureEntry(None, solution_text("t", "4"))] * 16)
        report, _ = run_benchmark(BenchmarkSpec("b", [p], 16, EngineConfig(max_rounds=0)), ScriptedBackend(fx))
        assert report.pass_at_1 == 1.0 == report.per_round_accuracy[0]

    def test_direct_only_columns(self):
        p = Problem("p", "2+2?", "4")
        report, _ = run_benchmark(BenchmarkSpec("b", [p], 1, EngineConfig(max_rounds=0)),
                                  ScriptedBackend([solution_text("t", "4")]))
        assert list(report.per_round_accuracy) == [0]
        assert list(report.tokens_cumulative) == [0]

    def test_failed_sample_counted_wrong(self):
        p = Problem("p", "2+2?", "4")
        report, results = run_benchmark(BenchmarkSpec("b", [p], 2, EngineConfig(max_rounds=1)),
                                        ScriptedBackend([solution_text("t", "4"), critique_text("Correct")]))
        assert report.incomplete and len(report.failed_samples) == 1
        assert report.pass_at_1 == 0.5
        assert report.unverifiable_rate == 0.0

    def test_seeds_per_sample(self):
        p = Problem("p", "2+2?", "4")
        b = ScriptedBackend([solution_text("t", "4")] * 3)
        run_benchmark(BenchmarkSpec("b", [p], 3, EngineConfig(max_rounds=0)), b, seed=7)
        assert [r.seed for r in b.requests] == [7, 8, 9]

    def test_missing_ground_truth(self):
        with pytest.raises(ValueError):
            run_benchmark(BenchmarkSpec("b", [Problem("p", "q")], 1), ScriptedBackend([]))
