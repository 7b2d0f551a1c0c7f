"""Critique-refine training data curation.

Pipeline per problem: optional difficulty filtering, an initial solution
from the teacher, a critique conditioned on whether that solution was
right, and (for wrong solutions) a refinement that is kept only when it
reaches the ground truth. Kept records and plain direct-inference examples
are written as chat-format instances whose assistant turn is the loss
target.
"""

from __future__ import annotations

import enum
import json
import logging
import os
import tempfile
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .backend import (
    Backend,
    BackendError,
    Completion,
    Message,
    TokenUsage,
    effective_parallelism,
    generate_batch,
)
from .engine import Problem, Round, SamplingParams, with_flag
from .textproto import (
    Critique,
    Judgment,
    TemplateId,
    TemplateSet,
    format_critique,
    pad_correct_instance,
    parse_critique,
    render_prompt,
    segment_completion,
    try_extract_boxed_answer,
    wrap_summary,
    wrap_thought,
)
from .verify import Verdict, score_answer

logger = logging.getLogger(__name__)

__all__ = [
    "Disposition",
    "CurationRecord",
    "TrainingInstance",
    "DatasetManifest",
    "CurationConfig",
    "CurationError",
    "JudgmentMismatch",
    "ParseFailure",
    "difficulty_filter",
    "initial_generation",
    "generate_critique",
    "refine",
    "curate_problem",
    "build_training_set",
]


class CurationError(RuntimeError):
    pass


class JudgmentMismatch(CurationError):
    pass


class ParseFailure(CurationError):
    pass


class Disposition(str, enum.Enum):
    KEPT_CORRECT_PATH = "KeptCorrectPath"
    KEPT_REFINED_PATH = "KeptRefinedPath"
    DISCARDED = "Discarded"

    @property
    def kept(self) -> bool:
        return self is not Disposition.DISCARDED


def decide_disposition(verdict0: Verdict, verdict1: Verdict | None) -> Disposition:
    if verdict0 is Verdict.CORRECT_ANSWER:
        return Disposition.KEPT_CORRECT_PATH
    if verdict1 is Verdict.CORRECT_ANSWER:
        return Disposition.KEPT_REFINED_PATH
    return Disposition.DISCARDED


@dataclass(frozen=True)
class CurationRecord:
    problem: Problem
    initial: Round
    verdict0: Verdict
    critique: Critique
    refined: Round | None = None
    verdict1: Verdict | None = None
    stage: int = 1

    @property
    def disposition(self) -> Disposition:
        return decide_disposition(self.verdict0, self.verdict1)

    @property
    def source_tag(self) -> str:
        tag = self.problem.source or "unknown"
        return f"{tag}:round{self.stage}" if self.stage > 1 else tag


@dataclass(frozen=True)
class CurationConfig:
    k: int = 4
    min_incorrect: int = 2
    filter_temperature: float = 0.6
    resample_budget: int = 2
    round2: bool = False
    max_in_flight: int = 1
    teacher: SamplingParams = field(default_factory=SamplingParams)
    critic: SamplingParams = field(default_factory=SamplingParams)
    refiner: SamplingParams = field(default_factory=SamplingParams)
    templates: TemplateSet = field(default_factory=TemplateSet)


# ---------------------------------------------------------------------------
# steps


def difficulty_filter(
    pool: Sequence[Problem],
    backend: Backend,
    k: int = 4,
    min_incorrect: int = 2,
    temperature: float = 0.6,
    sampling: SamplingParams | None = None,
    templates: TemplateSet | None = None,
    max_in_flight: int = 1,
) -> list[Problem]:
    """Keep problems the model gets wrong at least ``min_incorrect`` times out of ``k``.

    Unverifiable samples count as wrong. A problem whose samples could not
    all be generated is kept with an ``unfiltered`` flag. Call again with a
    stronger model's backend to run a second filtering stage.
    """
    if k < 1 or min_incorrect < 0:
        raise ValueError("need k >= 1 and min_incorrect >= 0")
    sampling = sampling or SamplingParams()
    templates = templates or TemplateSet()
    requests = []
    for problem in pool:
        if not problem.ground_truth:
            raise ValueError(f"problem {problem.id!r} has no ground truth")
        prompt = templates.render(TemplateId.DIRECT_INPUT, question=problem.question)
        req = SamplingParams(temperature, sampling.top_p, sampling.max_tokens, sampling.seed, sampling.model_id)
        requests.extend([req.request([Message("user", prompt)])] * k)

    results = generate_batch(backend, requests, effective_parallelism(backend, max_in_flight))
    kept = []
    for i, problem in enumerate(pool):
        chunk = results[i * k : (i + 1) * k]
        if any(isinstance(r, BackendError) for r in chunk):
            logger.warning("difficulty filter: %s left unfiltered after backend failure", problem.id)
            kept.append(with_flag(problem, "unfiltered"))
            continue
        incorrect = sum(
            score_answer(try_extract_boxed_answer(segment_completion(c.text).summary), problem.ground_truth)
            is not Verdict.CORRECT_ANSWER
            for c in chunk
        )
        if incorrect >= min_incorrect:
            kept.append(problem)
    return kept


def _round_from_text(index: int, text: str, usage: TokenUsage, completion: Completion | None = None,
                     critique: Critique | None = None) -> Round:
    seg = segment_completion(text)
    answer = try_extract_boxed_answer(seg.summary)
    flags = () if answer is not None else ("no_boxed_answer",)
    kwargs = {"finish_reason": completion.finish_reason} if completion else {}
    return Round(index, seg.thought, seg.summary, answer, usage, critique, flags=flags, **kwargs)


def initial_generation(
    problem: Problem,
    teacher: Backend,
    sampling: SamplingParams | None = None,
    templates: TemplateSet | None = None,
) -> tuple[Round, Verdict]:
    """Produce and score round 0.

    Problems carrying an annotated solution skip generation and have the
    supplied text segmented instead.
    """
    if not problem.ground_truth:
        raise ValueError(f"problem {problem.id!r} has no ground truth")
    if problem.annotated:
        thought = problem.annotated_thought or ""
        summary = problem.annotated_summary or ""
        if not thought:
            # a single annotated completion: split it like a generated one
            seg = segment_completion(summary)
            thought, summary = seg.thought, seg.summary
        answer = try_extract_boxed_answer(summary)
        rnd = Round(0, thought, summary, answer, TokenUsage(),
                    flags=("annotated",) + (() if answer is not None else ("no_boxed_answer",)))
    else:
        sampling = sampling or SamplingParams()
        templates = templates or TemplateSet()
        prompt = templates.render(TemplateId.DIRECT_INPUT, question=problem.question)
        completion = teacher.generate(sampling.request([Message("user", prompt)]))
        rnd = _round_from_text(0, completion.text, completion.token_usage, completion)
    return rnd, score_answer(rnd.answer, problem.ground_truth)


def _critique_messages(problem: Problem, s0: str, verdict0: Verdict, templates: TemplateSet) -> list[Message]:
    template_id = (
        TemplateId.CRITIQUE_CORRECT if verdict0 is Verdict.CORRECT_ANSWER else TemplateId.CRITIQUE_INCORRECT
    )
    return [
        Message("user", problem.question),
        Message("assistant", s0),
        Message("user", templates.get(template_id).body),
    ]


def generate_critique(
    problem: Problem,
    s0: str,
    verdict0: Verdict,
    critic: Backend,
    sampling: SamplingParams | None = None,
    templates: TemplateSet | None = None,
    resample_budget: int = 2,
) -> Critique:
    """Ask the critic for a critique given the known correctness of ``s0``.

    Critiques that fail to parse or whose judgment disagrees with
    ``verdict0`` are resampled up to ``resample_budget`` times.
    """
    sampling = sampling or SamplingParams()
    templates = templates or TemplateSet()
    expected = Judgment.CORRECT if verdict0 is Verdict.CORRECT_ANSWER else Judgment.INCORRECT
    request = sampling.request(_critique_messages(problem, s0, verdict0, templates))
    error: CurationError | None = None
    for _ in range(resample_budget + 1):
        critique = parse_critique(critic.generate(request).text)
        if critique.judgment is Judgment.UNPARSEABLE:
            error = ParseFailure(f"{problem.id}: critique did not follow the format")
        elif critique.judgment is not expected:
            error = JudgmentMismatch(
                f"{problem.id}: critique judged {critique.judgment.value}, expected {expected.value}"
            )
        else:
            return critique
    raise error


def refine(
    problem: Problem,
    s0: str,
    critique: Critique,
    refiner: Backend,
    sampling: SamplingParams | None = None,
    templates: TemplateSet | None = None,
    index: int = 1,
) -> tuple[Round, Verdict]:
    """Refine ``s0`` in light of the critique and score the new answer."""
    sampling = sampling or SamplingParams()
    templates = templates or TemplateSet()
    prompt = templates.render(
        TemplateId.REFINE_INPUT, question=problem.question, summary=s0, critique=format_critique(critique)
    )
    completion = refiner.generate(sampling.request([Message("user", prompt)]))
    rnd = _round_from_text(index, completion.text, completion.token_usage, completion, critique)
    return rnd, score_answer(rnd.answer, problem.ground_truth)


def curate_problem(
    problem: Problem,
    teacher: Backend,
    critic: Backend,
    refiner: Backend,
    config: CurationConfig = CurationConfig(),
) -> list[CurationRecord]:
    """Run one problem through generation, critique and refinement.

    Returns the records produced: normally one, two when the second-round
    extension applies, none when critique generation exhausted its budget
    (the problem is dropped and logged).
    """
    initial, verdict0 = initial_generation(problem, teacher, config.teacher, config.templates)
    records: list[CurationRecord] = []
    prior, prior_verdict = initial, verdict0
    for stage in (1, 2):
        try:
            critique = generate_critique(
                problem, prior.summary, prior_verdict, critic, config.critic, config.templates,
                config.resample_budget,
            )
        except CurationError as exc:
            logger.warning("dropping %s: %s", problem.id, exc)
            return records
        if prior_verdict is Verdict.CORRECT_ANSWER:
            records.append(CurationRecord(problem, prior, prior_verdict, critique, stage=stage))
            return records
        refined, verdict1 = refine(
            problem, prior.summary, critique, refiner, config.refiner, config.templates, index=stage
        )
        record = CurationRecord(problem, prior, prior_verdict, critique, refined, verdict1, stage=stage)
        records.append(record)
        if record.disposition is not Disposition.DISCARDED or not config.round2:
            return records
        prior, prior_verdict = refined, verdict1
    return records


# ---------------------------------------------------------------------------
# emission


@dataclass(frozen=True)
class TrainingInstance:
    """A prompt/target pair; the training loss covers ``target_span`` only."""

    kind: str
    prompt_span: str
    target_span: str
    source_tag: str

    @property
    def text(self) -> str:
        return self.prompt_span + self.target_span

    @property
    def target_offset(self) -> int:
        return len(self.prompt_span)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "messages": [
                {"role": "user", "content": self.prompt_span},
                {"role": "assistant", "content": self.target_span},
            ],
            "text": self.text,
            "target_offset": self.target_offset,
            "source_tag": self.source_tag,
        }

    @classmethod
    def from_dict(cls, d: dict) -> TrainingInstance:
        roles = {m["role"]: m["content"] for m in d["messages"]}
        return cls(d["kind"], roles["user"], roles["assistant"], d["source_tag"])


@dataclass
class DatasetManifest:
    direct_count: int = 0
    critique_count: int = 0
    dispositions: dict[str, int] = field(default_factory=dict)
    sources: dict[str, int] = field(default_factory=dict)
    dropped: int = 0
    template_version: str = "v1"

    @property
    def total(self) -> int:
        return self.direct_count + self.critique_count

    def to_dict(self) -> dict:
        d = asdict(self)
        d["total"] = self.total
        return d


def direct_instance(problem: Problem, thought: str, summary: str, templates: TemplateSet) -> TrainingInstance:
    prompt = templates.render(TemplateId.DIRECT_INPUT, question=problem.question)
    target = wrap_thought(thought) + "\n\n" + wrap_summary(summary)
    return TrainingInstance("direct", prompt, target, problem.source or "unknown")


def critique_instance(record: CurationRecord, templates: TemplateSet) -> TrainingInstance:
    """Turn a kept record into a critique-refine instance, padding the correct path."""
    if not record.disposition.kept:
        raise ValueError("discarded records produce no instance")
    prompt = templates.render(TemplateId.ROUND_INPUT, question=record.problem.question, summary=record.initial.summary)
    if record.disposition is Disposition.KEPT_CORRECT_PATH:
        pad_thought, pad_summary = pad_correct_instance(templates)
        thought = pad_thought
        summary = render_prompt(pad_summary, {"ANSWER": record.initial.answer or ""})
    else:
        thought = wrap_thought(record.refined.thought)
        summary = wrap_summary(record.refined.summary)
    target = "\n\n".join([format_critique(record.critique), thought, summary])
    return TrainingInstance("critique_refine", prompt, target, record.source_tag)


def build_training_set(
    direct: Iterable[tuple[Problem, str, str]],
    records: Iterable[CurationRecord],
    out_path: str | Path,
    manifest_path: str | Path | None = None,
    templates: TemplateSet | None = None,
    dropped: int = 0,
) -> DatasetManifest:
    """Write the mixed training set as JSONL and return its manifest.

    ``direct`` yields ``(problem, thought, summary)`` triples. The file is
    written to a temporary sibling and renamed, so a failure leaves no
    partial output behind.
    """
    templates = templates or TemplateSet()
    out_path = Path(out_path)
    manifest = DatasetManifest(dropped=dropped, template_version=templates.version)
    dispositions: Counter[str] = Counter()
    sources: Counter[str] = Counter()

    fd, tmp = tempfile.mkstemp(prefix=out_path.name, suffix=".tmp", dir=out_path.parent or ".")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            for problem, thought, summary in direct:
                inst = direct_instance(problem, thought, summary, templates)
                fh.write(json.dumps(inst.to_dict(), ensure_ascii=False) + "\n")
                manifest.direct_count += 1
                sources[inst.source_tag] += 1
            for record in records:
                dispositions[record.disposition.value] += 1
                if not record.disposition.kept:
                    continue
                inst = critique_instance(record, templates)
                fh.write(json.dumps(inst.to_dict(), ensure_ascii=False) + "\n")
                manifest.critique_count += 1
                sources[inst.source_tag] += 1
        os.replace(tmp, out_path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise

    manifest.dispositions = {d.value: dispositions.get(d.value, 0) for d in Disposition}
    manifest.sources = dict(sorted(sources.items()))
    if manifest_path is not None:
        Path(manifest_path).write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")
    return manifest


def read_training_set(path: str | Path) -> list[TrainingInstance]:
    with open(path, encoding="utf-8") as fh:
        return [TrainingInstance.from_dict(json.loads(line)) for line in fh if line.strip()]
