"""Iterative self-critique inference.

Round 0 answers the question directly. Each later round shows the model
only the question and the previous round's summary, and asks for a
critique followed by a refined solution. The loop stops as soon as a
critique judges the previous answer correct, returning that earlier
summary; otherwise the last summary is returned.
"""

from __future__ import annotations

import enum
import json
import logging
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable

from .backend import (
    Backend,
    BackendError,
    Completion,
    FinishReason,
    GenerationRequest,
    Message,
    TokenUsage,
)
from .textproto import (
    Critique,
    Delimiters,
    Judgment,
    MissingBinding,
    TemplateId,
    TemplateSet,
    parse_critique,
    segment_completion,
    split_round_output,
    try_extract_boxed_answer,
    wrap_thought,
)

logger = logging.getLogger(__name__)

TRACE_SCHEMA = "trace/v1"

__all__ = [
    "Problem",
    "Round",
    "SessionTrace",
    "SamplingParams",
    "EngineConfig",
    "ProbeJudgment",
    "ProbeResult",
    "EngineError",
    "BackendFailure",
    "TemplateFailure",
    "run_session",
    "assemble_round_input",
    "run_probe",
    "load_problems",
    "write_traces",
    "read_traces",
]


class EngineError(RuntimeError):
    pass


class BackendFailure(EngineError):
    """A backend call failed mid-session; ``trace`` holds the rounds completed so far."""

    def __init__(self, message: str, trace: SessionTrace | None = None):
        super().__init__(message)
        self.trace = trace


class TemplateFailure(EngineError):
    pass


# ---------------------------------------------------------------------------
# data


@dataclass(frozen=True)
class Problem:
    id: str
    question: str
    ground_truth: str = ""
    source: str = ""
    subject: str = ""
    annotated_thought: str | None = None
    annotated_summary: str | None = None
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.question:
            raise ValueError(f"problem {self.id!r} has an empty question")

    @property
    def annotated(self) -> bool:
        return self.annotated_summary is not None

    @classmethod
    def from_dict(cls, d: dict) -> Problem:
        return cls(
            id=str(d["id"]),
            question=d["question"],
            ground_truth=str(d.get("answer") or ""),
            source=d.get("source", ""),
            subject=d.get("subject", ""),
            annotated_thought=d.get("annotated_thought"),
            annotated_summary=d.get("annotated_summary"),
        )

    def to_dict(self) -> dict:
        d = {
            "id": self.id,
            "question": self.question,
            "answer": self.ground_truth,
            "source": self.source,
            "subject": self.subject,
        }
        if self.annotated_thought is not None:
            d["annotated_thought"] = self.annotated_thought
        if self.annotated_summary is not None:
            d["annotated_summary"] = self.annotated_summary
        return d


def load_problems(path: str | Path) -> list[Problem]:
    """Read a problem JSONL file, rejecting duplicate ids."""
    problems: list[Problem] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                problem = Problem.from_dict(json.loads(line))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
            if problem.id in seen:
                raise ValueError(f"{path}:{lineno}: duplicate problem id {problem.id!r}")
            seen.add(problem.id)
            problems.append(problem)
    return problems


@dataclass(frozen=True)
class Round:
    index: int
    thought: str
    summary: str
    answer: str | None
    token_usage: TokenUsage
    critique: Critique | None = None
    finish_reason: FinishReason = FinishReason.STOP
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        if (self.index == 0) != (self.critique is None):
            raise ValueError("round 0 has no critique; later rounds must have one")

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "critique": self.critique.to_dict() if self.critique else None,
            "thought": self.thought,
            "summary": self.summary,
            "answer": self.answer,
            "token_usage": self.token_usage.to_dict(),
            "finish_reason": self.finish_reason.value,
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, d: dict) -> Round:
        return cls(
            index=d["index"],
            thought=d["thought"],
            summary=d["summary"],
            answer=d["answer"],
            token_usage=TokenUsage(**d["token_usage"]),
            critique=Critique.from_dict(d["critique"]) if d.get("critique") else None,
            finish_reason=FinishReason(d.get("finish_reason", "stop")),
            flags=tuple(d.get("flags", ())),
        )


@dataclass(frozen=True)
class SessionTrace:
    problem_id: str
    rounds: tuple[Round, ...]
    stopped_early: bool
    returned_round: int
    final_answer: str | None
    sample_index: int = 0
    template_version: str = "v1"

    @property
    def completion_tokens(self) -> list[int]:
        return [r.token_usage.completion_tokens for r in self.rounds]

    def to_dict(self) -> dict:
        return {
            "schema": TRACE_SCHEMA,
            "problem_id": self.problem_id,
            "sample_index": self.sample_index,
            "template_version": self.template_version,
            "stopped_early": self.stopped_early,
            "returned_round": self.returned_round,
            "final_answer": self.final_answer,
            "rounds": [r.to_dict() for r in self.rounds],
        }

    @classmethod
    def from_dict(cls, d: dict) -> SessionTrace:
        if d.get("schema") != TRACE_SCHEMA:
            raise ValueError(f"unsupported trace schema {d.get('schema')!r}")
        return cls(
            problem_id=d["problem_id"],
            rounds=tuple(Round.from_dict(r) for r in d["rounds"]),
            stopped_early=d["stopped_early"],
            returned_round=d["returned_round"],
            final_answer=d["final_answer"],
            sample_index=d.get("sample_index", 0),
            template_version=d.get("template_version", "v1"),
        )


def write_traces(path: str | Path, traces: Iterable[SessionTrace]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for trace in traces:
            fh.write(json.dumps(trace.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")


def read_traces(path: str | Path) -> list[SessionTrace]:
    with open(path, encoding="utf-8") as fh:
        return [SessionTrace.from_dict(json.loads(line)) for line in fh if line.strip()]


@dataclass(frozen=True)
class SamplingParams:
    temperature: float = 0.6
    top_p: float = 1.0
    max_tokens: int = 32768
    seed: int | None = None
    model_id: str = ""

    def request(self, messages: Iterable[Message], seed: int | None = None) -> GenerationRequest:
        return GenerationRequest(
            messages=tuple(messages),
            temperature=self.temperature,
            top_p=self.top_p,
            max_tokens=self.max_tokens,
            seed=self.seed if seed is None else seed,
            model_id=self.model_id,
        )


@dataclass(frozen=True)
class EngineConfig:
    max_rounds: int = 3
    sampling: SamplingParams = field(default_factory=SamplingParams)
    templates: TemplateSet = field(default_factory=TemplateSet)
    delimiters: Delimiters = field(default_factory=Delimiters)
    # "user": question and summary in one user message; "assistant": summary as a prior assistant turn
    summary_role: str = "user"

    def __post_init__(self):
        if not 0 <= self.max_rounds <= 64:
            raise ValueError("max_rounds must be between 0 and 64")
        if self.summary_role not in ("user", "assistant"):
            raise ValueError("summary_role must be 'user' or 'assistant'")

    @property
    def round_input_template_version(self) -> str:
        return self.templates.version


# ---------------------------------------------------------------------------
# inference loop


def assemble_round_input(
    question: str,
    prev_summary: str,
    templates: TemplateSet | None = None,
    summary_role: str = "user",
) -> list[Message]:
    """Build the round-n context from the question and the previous summary only.

    With ``summary_role="assistant"`` the summary becomes an assistant turn
    between the question and the critique instruction.
    """
    if not prev_summary:
        raise TemplateFailure("previous summary is empty")
    templates = templates or TemplateSet()
    try:
        if summary_role == "assistant":
            return [
                Message("user", templates.render(TemplateId.DIRECT_INPUT, question=question)),
                Message("assistant", prev_summary),
                Message("user", templates.render(TemplateId.ROUND_INSTRUCTION)),
            ]
        text = templates.render(TemplateId.ROUND_INPUT, question=question, summary=prev_summary)
    except (MissingBinding, OSError) as exc:
        raise TemplateFailure(str(exc)) from exc
    return [Message("user", text)]


def _direct_messages(question: str, templates: TemplateSet) -> list[Message]:
    try:
        return [Message("user", templates.render(TemplateId.DIRECT_INPUT, question=question))]
    except (MissingBinding, OSError) as exc:
        raise TemplateFailure(str(exc)) from exc


def _round_from_completion(index: int, completion: Completion, delimiters: Delimiters) -> Round:
    flags = []
    critique = None
    if index == 0:
        seg = segment_completion(completion.text, delimiters)
    else:
        critique_text, seg = split_round_output(completion.text, delimiters)
        critique = parse_critique(critique_text)
        if critique.judgment is Judgment.UNPARSEABLE:
            flags.append("unparseable_critique")
    if not seg.well_formed:
        flags.append("no_thought_delimiter")
    answer = try_extract_boxed_answer(seg.summary)
    if answer is None:
        flags.append("no_boxed_answer")
    if completion.finish_reason is FinishReason.LENGTH:
        flags.append("truncated")
    return Round(
        index=index,
        thought=seg.thought,
        summary=seg.summary,
        answer=answer,
        token_usage=completion.token_usage,
        critique=critique,
        finish_reason=completion.finish_reason,
        flags=tuple(flags),
    )


def run_session(
    problem: Problem,
    config: EngineConfig,
    backend: Backend,
    *,
    sample_index: int = 0,
    seed: int | None = None,
) -> SessionTrace:
    """Run direct inference followed by up to ``config.max_rounds`` critique-refine rounds."""
    rounds: list[Round] = []

    def partial() -> SessionTrace:
        last = len(rounds) - 1
        return SessionTrace(
            problem.id, tuple(rounds), False, max(last, 0),
            rounds[last].answer if rounds else None, sample_index, config.templates.version,
        )

    def call(messages: list[Message]) -> Completion:
        try:
            return backend.generate(config.sampling.request(messages, seed))
        except BackendError as exc:
            raise BackendFailure(f"{problem.id}: round {len(rounds)}: {exc}", partial()) from exc

    completion = call(_direct_messages(problem.question, config.templates))
    rounds.append(_round_from_completion(0, completion, config.delimiters))

    for n in range(1, config.max_rounds + 1):
        messages = assemble_round_input(problem.question, rounds[n - 1].summary, config.templates,
                                        config.summary_role)
        completion = call(messages)
        current = _round_from_completion(n, completion, config.delimiters)
        rounds.append(current)
        if current.critique.judgment is Judgment.CORRECT:
            return SessionTrace(
                problem.id, tuple(rounds), True, n - 1, rounds[n - 1].answer,
                sample_index, config.templates.version,
            )

    return SessionTrace(
        problem.id, tuple(rounds), False, len(rounds) - 1, rounds[-1].answer,
        sample_index, config.templates.version,
    )


# ---------------------------------------------------------------------------
# probe


class ProbeJudgment(str, enum.Enum):
    RIGHT = "right"
    WRONG = "wrong"
    NONE = "none"


@dataclass(frozen=True)
class ProbeResult:
    problem_id: str
    followed_format: bool
    judgment: ProbeJudgment
    informative: bool
    revised_answer: str | None = None
    token_usage: TokenUsage = field(default_factory=TokenUsage)

    def to_dict(self) -> dict:
        return {
            "problem_id": self.problem_id,
            "followed_format": self.followed_format,
            "judgment": self.judgment.value,
            "informative": self.informative,
            "revised_answer": self.revised_answer,
            "token_usage": self.token_usage.to_dict(),
        }


_CONCLUSION = re.compile(r"conclusion\s*[:：]\s*[*_`'\"]*\s*(right|wrong)\b[*_`'\"]*\s*(\[END\])?", re.I)

# phrases indicating the text passes judgment on the earlier solution
_ASSESSMENT = re.compile(
    r"\b(is|was|are|were|seems|appears)\s+(not\s+)?(correct|incorrect|right|wrong|valid|invalid|flawed|accurate)\b"
    r"|\b(an?|no|the)\s+(error|mistake|flaw)s?\b"
    r"|\b(mistakes?|errors?)\s+in\b",
    re.I,
)


def assesses_prior_solution(text: str) -> bool:
    """Heuristic check that a probe response evaluates the earlier solution."""
    return bool(_ASSESSMENT.search(text))


def parse_probe_response(
    problem_id: str,
    text: str,
    token_usage: TokenUsage = TokenUsage(),
    assess: Callable[[str], bool] = assesses_prior_solution,
) -> ProbeResult:
    """Classify a response to the critique probe.

    The last ``Conclusion: right/wrong`` line decides the judgment. A
    response is informative when it reaches a judgment and its critique
    text actually assesses the prior solution.
    """
    matches = list(_CONCLUSION.finditer(text))
    if not matches:
        return ProbeResult(problem_id, False, ProbeJudgment.NONE, False, None, token_usage)
    last = matches[-1]
    judgment = ProbeJudgment(last.group(1).lower())
    informative = assess(text[: last.start()])
    revised = None
    if judgment is ProbeJudgment.WRONG:
        revised = try_extract_boxed_answer(text[last.end():])
    return ProbeResult(problem_id, True, judgment, informative, revised, token_usage)


def run_probe(
    problem: Problem,
    prior_thought: str,
    prior_summary: str,
    backend: Backend,
    config: EngineConfig | None = None,
    assess: Callable[[str], bool] = assesses_prior_solution,
) -> ProbeResult:
    """Append the critique probe after a prior solution and classify the reply."""
    config = config or EngineConfig()
    if not prior_summary:
        raise ValueError("run_probe needs a prior solution")
    prior = prior_summary
    if prior_thought:
        prior = wrap_thought(prior_thought, config.delimiters) + "\n\n" + prior_summary
    messages = _direct_messages(problem.question, config.templates) + [
        Message("assistant", prior),
        Message("user", config.templates.get(TemplateId.PROBE).body),
    ]
    try:
        completion = backend.generate(config.sampling.request(messages))
    except BackendError as exc:
        raise BackendFailure(f"{problem.id}: probe: {exc}") from exc
    return parse_probe_response(problem.id, completion.text, completion.token_usage, assess)


def with_flag(problem: Problem, flag: str) -> Problem:
    return replace(problem, flags=problem.flags + (flag,))

