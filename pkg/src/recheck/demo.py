"""Builders for scripted completions and the bundled demo corpora.

The files under ``data/`` are generated by :func:`write_demo_data`; run
``python -m recheck.demo`` to regenerate them.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

from .backend import Fixture, FixtureEntry
from .engine import Problem

DATA_DIR = Path(__file__).parent / "data"


def sentinel(problem_id: str, round_index: int) -> str:
    """A marker planted in scripted thoughts so context leaks are detectable."""
    return f"THOUGHT-SENTINEL-{problem_id}-R{round_index}"


def critique_text(judgment: str, analysis: str = "", suggestions: str = "") -> str:
    analysis = analysis or f"The previous summary looks {judgment.lower()} after checking each step."
    suggestions = suggestions or "Re-check the arithmetic in the final step."
    return (
        "<critique>\n"
        f"Analysis:\n{analysis}\n\n"
        f"Improvement suggestions:\n{suggestions}\n\n"
        f"Overall judgment:\n{judgment}\n"
        "</critique>"
    )


def solution_text(thought: str, answer: str | None, critique: str | None = None) -> str:
    """A completion in ``[critique] <think>thought</think> summary`` layout.

    ``answer=None`` yields a summary without a boxed answer.
    """
    summary = f"So the final answer is \\boxed{{{answer}}}." if answer is not None else "I could not finish."
    body = f"<think>\n{thought}\n</think>\n\n{summary}"
    return f"{critique}\n\n{body}" if critique else body


def entry(text: str, completion_tokens: int | None = None, prompt_tokens: int | None = None) -> FixtureEntry:
    return FixtureEntry(None, text, prompt_tokens, completion_tokens)


# ---------------------------------------------------------------------------
# 10-problem benchmark: 4 right at round 0, 3 fixed in round 1, 3 never fixed


def _arith(i: int) -> tuple[str, str]:
    a, b = 3 + i, 11 + 2 * i
    return f"What is {a} + {b}?", str(a + b)


def demo_benchmark_problems() -> list[Problem]:
    problems = []
    for i in range(10):
        question, answer = _arith(i)
        problems.append(Problem(f"demo-{i}", question, answer, source="demo", subject="arithmetic"))
    return problems


def demo_benchmark_entries() -> list[FixtureEntry]:
    """Sequential fixture for one sample per problem with ``max_rounds=1``."""
    entries = []
    for i, p in enumerate(demo_benchmark_problems()):
        truth = int(p.ground_truth)
        first = str(truth) if i < 4 else str(truth + 1)
        entries.append(entry(solution_text(f"{sentinel(p.id, 0)} adding the numbers carefully", first), 1000 + 40 * i))
        if i < 4:
            text = solution_text(f"{sentinel(p.id, 1)} nothing to change", str(truth), critique_text("Correct"))
        elif i < 7:
            text = solution_text(f"{sentinel(p.id, 1)} redo the sum", str(truth), critique_text("Incorrect"))
        else:
            text = solution_text(f"{sentinel(p.id, 1)} redo the sum", str(truth + 2), critique_text("Incorrect"))
        entries.append(entry(text, 300 + 10 * i))
    return entries


def demo_infer_entries() -> list[FixtureEntry]:
    """Sequential fixture for the benchmark problems at the default three rounds.

    demo-0..3 stop after one Correct critique, demo-4..6 are fixed in round 1
    and confirmed in round 2, demo-7..9 are judged Incorrect three times.
    """
    entries = []
    for i, p in enumerate(demo_benchmark_problems()):
        truth = int(p.ground_truth)
        first = str(truth) if i < 4 else str(truth + 1)
        entries.append(entry(solution_text(f"{sentinel(p.id, 0)} adding the numbers carefully", first), 1000 + 40 * i))
        if i < 4:
            plan = [("Correct", truth)]
        elif i < 7:
            plan = [("Incorrect", truth), ("Correct", truth)]
        else:
            plan = [("Incorrect", truth + 2), ("Incorrect", truth + 3), ("Incorrect", truth + 4)]
        for r, (judgment, answer) in enumerate(plan, 1):
            text = solution_text(f"{sentinel(p.id, r)} checking again", str(answer), critique_text(judgment))
            entries.append(entry(text, 300 + 10 * i - 50 * (r - 1)))
    return entries


# ---------------------------------------------------------------------------
# 5-problem curation corpus
#
#   cur-0  filter W W C C (kept)   initial right        -> KeptCorrectPath
#   cur-1  filter W W W W (kept)   initial wrong, refine right -> KeptRefinedPath
#   cur-2  filter no box x4 (kept) initial wrong, refine wrong -> Discarded
#   cur-3  filter W C W C (kept)   initial unboxed, refine right -> KeptRefinedPath
#   cur-4  filter C C C W (removed)


CURATION_EXPECTED = {
    "cur-0": "KeptCorrectPath",
    "cur-1": "KeptRefinedPath",
    "cur-2": "Discarded",
    "cur-3": "KeptRefinedPath",
}


def demo_curation_problems() -> list[Problem]:
    problems = []
    for i in range(5):
        question, answer = _arith(20 + i)
        problems.append(Problem(f"cur-{i}", question, answer, source="demo-pool", subject="arithmetic"))
    return problems


def demo_direct_problems() -> list[Problem]:
    problems = []
    for i in range(2):
        question, answer = _arith(40 + i)
        problems.append(Problem(
            f"direct-{i}", question, answer, source="demo-direct", subject="arithmetic",
            annotated_thought=f"Add the two numbers: the sum is {answer}.",
            annotated_summary=f"The answer is \\boxed{{{answer}}}.",
        ))
    return problems


def demo_curation_entries(with_filter: bool = True) -> list[FixtureEntry]:
    problems = demo_curation_problems()
    truth = [int(p.ground_truth) for p in problems]
    entries = []
    if with_filter:
        patterns = ["WWCC", "WWWW", "NNNN", "WCWC", "CCCW"]
        for t, pattern in zip(truth, patterns):
            for mark in pattern:
                answer = {"C": str(t), "W": str(t + 3), "N": None}[mark]
                entries.append(entry(solution_text("filter sample", answer)))
    t0, t1, t2, t3 = truth[:4]
    entries += [
        entry(solution_text("initial reasoning", str(t0))),
        entry(critique_text("Correct")),
        entry(solution_text("initial reasoning", str(t1 + 1))),
        entry(critique_text("Incorrect")),
        entry(solution_text("refined reasoning", str(t1))),
        entry(solution_text("initial reasoning", str(t2 + 1))),
        entry(critique_text("Incorrect")),
        entry(solution_text("refined reasoning", str(t2 + 5))),
        entry(solution_text("initial reasoning", None)),
        entry(critique_text("Incorrect")),
        entry(solution_text("refined reasoning", str(t3))),
    ]
    return entries


# ---------------------------------------------------------------------------


def write_problems(path: str | Path, problems: list[Problem]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in problems:
            fh.write(json.dumps(p.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")


def write_demo_data(directory: str | Path = DATA_DIR) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {
        "benchmark_problems.jsonl": lambda p: write_problems(p, demo_benchmark_problems()),
        "benchmark_fixture.jsonl": lambda p: Fixture(demo_benchmark_entries()).dump(p),
        "infer_fixture.jsonl": lambda p: Fixture(demo_infer_entries()).dump(p),
        "curation_problems.jsonl": lambda p: write_problems(p, demo_curation_problems()),
        "curation_direct.jsonl": lambda p: write_problems(p, demo_direct_problems()),
        "curation_fixture.jsonl": lambda p: Fixture(demo_curation_entries()).dump(p),
    }
    written = []
    for name, write in files.items():
        write(directory / name)
        written.append(directory / name)
    return written


if __name__ == "__main__":
    for path in write_demo_data(sys.argv[1] if len(sys.argv) > 1 else DATA_DIR):
        print(path)
