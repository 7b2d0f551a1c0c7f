"""Benchmark execution and metrics."""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from statistics import fmean
from typing import Sequence

from .backend import Backend, effective_parallelism
from .engine import (
    BackendFailure,
    EngineConfig,
    EngineError,
    Problem,
    ProbeResult,
    SessionTrace,
    run_session,
)
from .textproto import Judgment
from .verify import Verdict, score_answer

logger = logging.getLogger(__name__)

__all__ = [
    "DomainError",
    "pass_at_k",
    "answer_at_round",
    "BenchmarkSpec",
    "SampleResult",
    "BenchmarkReport",
    "score_trace",
    "run_benchmark",
    "build_report",
    "token_report",
    "informativeness_rate",
    "follow_format_rate",
    "format_table",
    "write_report",
]


class DomainError(ValueError):
    pass


def pass_at_k(n: int, c: int, k: int) -> float:
    """Unbiased pass@k: ``1 - C(n-c, k) / C(n, k)``.

    The binomial ratio is evaluated as a running product so large ``n``
    never forms a huge binomial coefficient.
    """
    if not (0 <= c <= n and 1 <= k <= n):
        raise DomainError(f"pass_at_k needs 0 <= c <= n and 1 <= k <= n, got n={n} c={c} k={k}")
    if k == 1:
        return c / n
    if n - c < k:
        return 1.0
    miss = 1.0
    for i in range(n - c + 1, n + 1):
        miss *= 1.0 - k / i
    return 1.0 - miss


def answer_at_round(trace: SessionTrace, r: int) -> str | None:
    """The answer the engine would have returned had it been capped at ``r`` rounds.

    Stopping decisions at rounds up to ``r`` never depend on later rounds,
    so one long trace yields the answer for every smaller cap.
    """
    rounds = trace.rounds
    for n in range(1, r + 1):
        if n >= len(rounds):
            return rounds[-1].answer
        if rounds[n].critique.judgment is Judgment.CORRECT:
            return rounds[n - 1].answer
    return rounds[min(r, len(rounds) - 1)].answer


@dataclass(frozen=True)
class BenchmarkSpec:
    name: str
    problems: Sequence[Problem]
    samples_per_problem: int = 4
    engine_config: EngineConfig = field(default_factory=EngineConfig)

    def __post_init__(self):
        if self.samples_per_problem < 1:
            raise ValueError("samples_per_problem must be >= 1")


@dataclass(frozen=True)
class SampleResult:
    problem_id: str
    sample_index: int
    trace: SessionTrace | None
    correct: bool
    verdict: Verdict
    per_round_answers: tuple[tuple[int, str | None, bool], ...] = ()
    error: str | None = None


@dataclass
class BenchmarkReport:
    name: str
    max_rounds: int
    samples_per_problem: int
    num_problems: int
    pass_at_1: float
    per_round_accuracy: dict[int, float]
    tokens_avg_per_round: dict[int, float]
    tokens_cumulative: dict[int, float]
    early_stop_rate: float
    unverifiable_rate: float
    failed_samples: list[str] = field(default_factory=list)

    @property
    def incomplete(self) -> bool:
        return bool(self.failed_samples)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["incomplete"] = self.incomplete
        for key in ("per_round_accuracy", "tokens_avg_per_round", "tokens_cumulative"):
            d[key] = {str(k): v for k, v in d[key].items()}
        return d


def token_report(traces: Sequence[SessionTrace]) -> tuple[dict[int, float], dict[int, float]]:
    """Per-round average and cumulative completion tokens.

    The average for round n is taken over traces that reached round n; the
    cumulative figure averages, over all traces, tokens spent up to round n
    (or the trace's last round, if it stopped sooner).
    """
    if not traces:
        raise ValueError("token_report needs at least one trace")
    per_trace = [t.completion_tokens for t in traces]
    last = max(len(toks) for toks in per_trace)
    avg, cumulative = {}, {}
    for n in range(last):
        avg[n] = fmean(toks[n] for toks in per_trace if len(toks) > n)
        cumulative[n] = fmean(sum(toks[: n + 1]) for toks in per_trace)
    return avg, cumulative


def informativeness_rate(results: Sequence[ProbeResult]) -> float:
    if not results:
        raise ValueError("informativeness_rate needs at least one probe result")
    return sum(r.informative for r in results) / len(results)


def follow_format_rate(results: Sequence[ProbeResult]) -> float:
    if not results:
        raise ValueError("follow_format_rate needs at least one probe result")
    return sum(r.followed_format for r in results) / len(results)


def score_trace(trace: SessionTrace, problem: Problem, max_rounds: int) -> SampleResult:
    verdict = score_answer(trace.final_answer, problem.ground_truth)
    per_round = []
    for r in range(max_rounds + 1):
        answer = answer_at_round(trace, r)
        per_round.append((r, answer, score_answer(answer, problem.ground_truth) is Verdict.CORRECT_ANSWER))
    return SampleResult(
        problem.id, trace.sample_index, trace, verdict is Verdict.CORRECT_ANSWER, verdict, tuple(per_round)
    )


def build_report(
    name: str,
    problems: Sequence[Problem],
    results: Sequence[SampleResult],
    max_rounds: int,
    samples_per_problem: int,
) -> BenchmarkReport:
    """Fold sample results into a report; failed samples score as incorrect."""
    if not results:
        raise ValueError("no sample results to report")
    by_problem: dict[str, list[SampleResult]] = {p.id: [] for p in problems}
    for res in results:
        by_problem.setdefault(res.problem_id, []).append(res)
    pass1 = fmean(
        pass_at_k(len(rs), sum(r.correct for r in rs), 1) for rs in by_problem.values() if rs
    )
    per_round = {}
    for r in range(max_rounds + 1):
        per_round[r] = fmean(
            bool(res.per_round_answers) and res.per_round_answers[r][2] for res in results
        )
    traces = [res.trace for res in results if res.trace is not None and res.error is None]
    avg, cumulative = token_report(traces) if traces else ({}, {})
    return BenchmarkReport(
        name=name,
        max_rounds=max_rounds,
        samples_per_problem=samples_per_problem,
        num_problems=len(by_problem),
        pass_at_1=pass1,
        per_round_accuracy=per_round,
        tokens_avg_per_round=avg,
        tokens_cumulative=cumulative,
        early_stop_rate=fmean(bool(res.trace and res.trace.stopped_early) for res in results),
        unverifiable_rate=fmean(res.verdict is Verdict.UNVERIFIABLE for res in results),
        failed_samples=[f"{res.problem_id}#{res.sample_index}: {res.error}" for res in results if res.error],
    )


def run_benchmark(
    spec: BenchmarkSpec,
    backend: Backend,
    max_in_flight: int = 1,
    seed: int | None = None,
) -> tuple[BenchmarkReport, list[SampleResult]]:
    """Run every (problem, sample) session and score it against the ground truth.

    With ``seed`` set, sample ``i`` sends request seed ``seed + i``.
    """
    config = spec.engine_config
    for p in spec.problems:
        if not p.ground_truth:
            raise ValueError(f"problem {p.id!r} has no ground truth")
    jobs = [(p, i) for p in spec.problems for i in range(spec.samples_per_problem)]

    def run(job: tuple[Problem, int]) -> SampleResult:
        problem, i = job
        try:
            trace = run_session(problem, config, backend, sample_index=i,
                                seed=None if seed is None else seed + i)
        except EngineError as exc:
            logger.warning("sample %s#%d failed: %s", problem.id, i, exc)
            partial = exc.trace if isinstance(exc, BackendFailure) else None
            return SampleResult(problem.id, i, partial, False, Verdict.WRONG_ANSWER, error=str(exc))
        return score_trace(trace, problem, config.max_rounds)

    workers = effective_parallelism(backend, max_in_flight)
    if workers == 1:
        results = [run(j) for j in jobs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, jobs))
    report = build_report(spec.name, spec.problems, results, config.max_rounds, spec.samples_per_problem)
    return report, results


# ---------------------------------------------------------------------------
# output


def format_table(report: BenchmarkReport) -> str:
    lines = [
        f"benchmark: {report.name}  problems: {report.num_problems}  "
        f"samples/problem: {report.samples_per_problem}  N: {report.max_rounds}",
        f"pass@1: {report.pass_at_1:.4f}  early stop: {report.early_stop_rate:.4f}  "
        f"unverifiable: {report.unverifiable_rate:.4f}",
        "per_round_accuracy {" + ", ".join(f"{r}: {a:.2f}" for r, a in report.per_round_accuracy.items()) + "}",
        "",
        f"{'round':>5}  {'accuracy':>8}  {'avg tokens':>10}  {'cum tokens':>10}",
    ]
    for r, acc in report.per_round_accuracy.items():
        avg = report.tokens_avg_per_round.get(r)
        cum = report.tokens_cumulative.get(r)
        avg_s = f"{avg:10.1f}" if avg is not None else f"{'-':>10}"
        cum_s = f"{cum:10.1f}" if cum is not None else f"{'-':>10}"
        lines.append(f"{r:>5}  {acc:8.4f}  {avg_s}  {cum_s}")
    if report.failed_samples:
        lines.append(f"incomplete: {len(report.failed_samples)} failed samples")
    return "\n".join(lines)


def per_round_csv(report: BenchmarkReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["round", "accuracy", "avg_tokens", "cumulative_tokens"])
    for r, acc in report.per_round_accuracy.items():
        writer.writerow([r, acc, report.tokens_avg_per_round.get(r, ""), report.tokens_cumulative.get(r, "")])
    return buf.getvalue()


def write_report(report: BenchmarkReport, out_dir: str | Path) -> dict[str, Path]:
    """Write ``report.json``, ``report.txt`` and ``per_round.csv`` into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "json": out_dir / "report.json",
        "table": out_dir / "report.txt",
        "csv": out_dir / "per_round.csv",
    }
    paths["json"].write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    paths["table"].write_text(format_table(report) + "\n")
    paths["csv"].write_text(per_round_csv(report))
    return paths
