"""Parsing and rendering of structured model text.

Covers thought/summary segmentation of completions, ``\\boxed{}`` answer
extraction, critique parsing, and the ``{{name}}`` prompt templates stored
in the ``templates/`` directory.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

__all__ = [
    "Delimiters",
    "SegmentedOutput",
    "Judgment",
    "Critique",
    "TemplateId",
    "PromptTemplate",
    "TemplateSet",
    "NoBoxedAnswer",
    "MissingBinding",
    "segment_completion",
    "split_round_output",
    "extract_boxed_answer",
    "parse_critique",
    "format_critique",
    "render_prompt",
    "load_template",
    "pad_correct_instance",
    "wrap_thought",
    "wrap_summary",
]

TEMPLATES_DIR = Path(__file__).parent / "templates"

_PLACEHOLDER = re.compile(r"\{\{(\w+)\}\}")
_BOXED = "\\boxed{"


class NoBoxedAnswer(ValueError):
    """Raised when a text holds no complete ``\\boxed{...}`` expression."""


class MissingBinding(KeyError):
    """Raised when a template placeholder has no binding."""

    def __init__(self, name: str, template_id: str | None = None):
        super().__init__(name)
        self.name = name
        self.template_id = template_id

    def __str__(self) -> str:
        where = f" in template {self.template_id}" if self.template_id else ""
        return f"missing binding for placeholder {{{{{self.name}}}}}{where}"


# ---------------------------------------------------------------------------
# segmentation


@dataclass(frozen=True)
class Delimiters:
    think_open: str = "<think>"
    think_close: str = "</think>"
    summary_open: str = "<summary>"
    summary_close: str = "</summary>"


@dataclass(frozen=True)
class SegmentedOutput:
    """A completion split into its reasoning span and concluding summary.

    ``head``, ``middle`` and ``tail`` hold the delimiter text and whitespace
    around the two spans, so ``head + thought + middle + summary + tail``
    always equals the raw completion. ``preamble`` is whatever preceded the
    opening think tag (the critique, in refinement rounds).
    """

    thought: str
    summary: str
    well_formed: bool
    preamble: str = ""
    head: str = ""
    middle: str = ""
    tail: str = ""

    def reconstruct(self) -> str:
        return self.head + self.thought + self.middle + self.summary + self.tail


def _strip_span(raw: str, start: int, end: int) -> tuple[int, int]:
    while start < end and raw[start].isspace():
        start += 1
    while end > start and raw[end - 1].isspace():
        end -= 1
    return start, end


def segment_completion(raw: str, delimiters: Delimiters = Delimiters()) -> SegmentedOutput:
    """Split a completion on the thought-close delimiter.

    Never fails: without a close delimiter the whole text becomes the summary
    and ``well_formed`` is false.
    """
    close_at = raw.find(delimiters.think_close)
    if close_at < 0:
        return SegmentedOutput(thought="", summary=raw, well_formed=False)

    open_at = raw.rfind(delimiters.think_open, 0, close_at)
    if open_at >= 0:
        preamble = raw[:open_at].strip()
        t_start = open_at + len(delimiters.think_open)
    else:
        preamble = ""
        t_start = 0
    t_start, t_end = _strip_span(raw, t_start, close_at)

    s_start = close_at + len(delimiters.think_close)
    s_end = len(raw)
    s_start, s_end = _strip_span(raw, s_start, s_end)
    if delimiters.summary_open and raw.startswith(delimiters.summary_open, s_start):
        inner_start = s_start + len(delimiters.summary_open)
        inner_end = raw.find(delimiters.summary_close, inner_start)
        if inner_end < 0:
            inner_end = s_end
        s_start, s_end = _strip_span(raw, inner_start, inner_end)

    return SegmentedOutput(
        thought=raw[t_start:t_end],
        summary=raw[s_start:s_end],
        well_formed=True,
        preamble=preamble,
        head=raw[:t_start],
        middle=raw[t_end:s_start],
        tail=raw[s_end:],
    )


_CRITIQUE_BLOCK = re.compile(r"<critique>(.*?)(?:</critique>|\Z)", re.S | re.I)


def split_round_output(raw: str, delimiters: Delimiters = Delimiters()) -> tuple[str, SegmentedOutput]:
    """Separate the critique text from a refinement-round completion.

    Returns ``(critique_text, segmented)``. The critique is the
    ``<critique>`` block when present, else the text ahead of the opening
    think tag, else everything ahead of the thought-close delimiter.
    """
    seg = segment_completion(raw, delimiters)
    block = _CRITIQUE_BLOCK.search(raw)
    if block:
        return block.group(1).strip(), seg
    if seg.preamble:
        return seg.preamble, seg
    if seg.well_formed:
        return raw[: raw.find(delimiters.think_close)].strip(), seg
    return raw, seg


def wrap_thought(thought: str, delimiters: Delimiters = Delimiters()) -> str:
    return f"{delimiters.think_open}\n{thought}\n{delimiters.think_close}"


def wrap_summary(summary: str, delimiters: Delimiters = Delimiters()) -> str:
    return f"{delimiters.summary_open}\n{summary}\n{delimiters.summary_close}"


# ---------------------------------------------------------------------------
# boxed answers


def extract_boxed_answer(summary: str) -> str:
    """Return the contents of the last top-level ``\\boxed{...}``.

    Boxes nested inside another box's argument belong to that box, so
    ``\\boxed{\\boxed{1}}`` yields ``\\boxed{1}``.
    """
    found: str | None = None
    pos = summary.find(_BOXED)
    while pos >= 0:
        start = pos + len(_BOXED)
        depth = 1
        i = start
        while i < len(summary):
            ch = summary[i]
            if ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    break
            i += 1
        if depth:
            raise NoBoxedAnswer("unbalanced braces after \\boxed{")
        found = summary[start:i]
        pos = summary.find(_BOXED, i + 1)
    if found is None:
        raise NoBoxedAnswer("no \\boxed{ in text")
    return found


def try_extract_boxed_answer(summary: str) -> str | None:
    try:
        return extract_boxed_answer(summary)
    except NoBoxedAnswer:
        return None


# ---------------------------------------------------------------------------
# critiques


class Judgment(str, enum.Enum):
    CORRECT = "Correct"
    INCORRECT = "Incorrect"
    UNPARSEABLE = "Unparseable"


@dataclass(frozen=True)
class Critique:
    analysis: str
    suggestions: str
    judgment: Judgment
    text: str = ""

    def to_dict(self) -> dict:
        return {
            "analysis": self.analysis,
            "suggestions": self.suggestions,
            "judgment": self.judgment.value,
            "text": self.text,
        }

    @classmethod
    def from_dict(cls, d: dict) -> Critique:
        return cls(d["analysis"], d["suggestions"], Judgment(d["judgment"]), d.get("text", ""))


_HEADER = re.compile(
    r"^[ \t>#*_]*(analysis|improvement\s+suggestions|overall\s+judge?ment)[ \t*_]*:[ \t*_]*",
    re.I | re.M,
)
_TAGS = re.compile(r"</?critique>", re.I)


def _section_key(name: str) -> str:
    return name.lower().split()[0]


def parse_critique(text: str) -> Critique:
    """Parse a three-section critique.

    A critique is recognized only when all three sections are present and
    the analysis and suggestions are non-empty; anything else comes back as
    ``Judgment.UNPARSEABLE``. Never raises.
    """
    body = _TAGS.sub("", text)
    headers = list(_HEADER.finditer(body))
    sections: dict[str, str] = {}
    for i, m in enumerate(headers):
        key = _section_key(m.group(1))
        end = headers[i + 1].start() if i + 1 < len(headers) else len(body)
        # first occurrence wins; later repeats are usually quoted format text
        sections.setdefault(key, body[m.end():end].strip().strip("*_").strip())

    unparseable = Critique("", "", Judgment.UNPARSEABLE, text)
    if set(sections) != {"analysis", "improvement", "overall"}:
        return unparseable
    analysis, suggestions = sections["analysis"], sections["improvement"]
    if not analysis or not suggestions:
        return unparseable
    verdict = sections["overall"].lower()
    if "incorrect" in verdict:
        judgment = Judgment.INCORRECT
    elif "correct" in verdict:
        judgment = Judgment.CORRECT
    else:
        return unparseable
    return Critique(analysis, suggestions, judgment, text)


def format_critique(critique: Critique) -> str:
    """Render a critique in the canonical tagged layout."""
    return (
        "<critique>\n"
        f"Analysis:\n{critique.analysis}\n\n"
        f"Improvement suggestions:\n{critique.suggestions}\n\n"
        f"Overall judgment:\n{critique.judgment.value}\n"
        "</critique>"
    )


# ---------------------------------------------------------------------------
# templates


class TemplateId(str, enum.Enum):
    CRITIQUE_CORRECT = "CritiqueCorrect"
    CRITIQUE_INCORRECT = "CritiqueIncorrect"
    PROBE = "Probe"
    ROUND_INPUT = "RoundInput"
    ROUND_INSTRUCTION = "RoundInstruction"
    REFINE_INPUT = "RefineInput"
    PAD_THOUGHT = "PadThought"
    PAD_SUMMARY = "PadSummary"
    DIRECT_INPUT = "DirectInput"


@dataclass(frozen=True)
class PromptTemplate:
    id: TemplateId
    body: str

    @property
    def placeholders(self) -> tuple[str, ...]:
        return tuple(dict.fromkeys(_PLACEHOLDER.findall(self.body)))


def render_prompt(template: PromptTemplate, bindings: dict[str, str]) -> str:
    """Substitute ``{{name}}`` placeholders in a single pass.

    Bound values are inserted literally; placeholders appearing inside a
    value are not expanded.
    """
    for name in template.placeholders:
        if name not in bindings:
            raise MissingBinding(name, template.id.value)
    return _PLACEHOLDER.sub(lambda m: bindings[m.group(1)], template.body)


def _read_template(path: Path, template_id: TemplateId) -> PromptTemplate:
    return PromptTemplate(template_id, path.read_text(encoding="utf-8").rstrip("\n"))


@lru_cache(maxsize=None)
def _bundled(template_id: TemplateId) -> PromptTemplate:
    return _read_template(TEMPLATES_DIR / f"{template_id.value}.txt", template_id)


def load_template(template_id: TemplateId | str, directory: str | Path | None = None) -> PromptTemplate:
    """Load a template, preferring ``directory`` over the bundled copy."""
    template_id = TemplateId(template_id)
    if directory is not None:
        path = Path(directory) / f"{template_id.value}.txt"
        if path.exists():
            return _read_template(path, template_id)
    return _bundled(template_id)


@dataclass(frozen=True)
class TemplateSet:
    """Templates resolved against an optional override directory.

    ``version`` labels the set in traces and manifests; the bundled
    templates are ``v1``.
    """

    directory: str | None = None
    version: str = "v1"

    def get(self, template_id: TemplateId | str) -> PromptTemplate:
        return load_template(template_id, self.directory)

    def render(self, template_id: TemplateId | str, **bindings: str) -> str:
        return render_prompt(self.get(template_id), bindings)


def pad_correct_instance(templates: TemplateSet | None = None) -> tuple[str, PromptTemplate]:
    """Return the padding thought text and the summary template (``ANSWER`` slot)."""
    templates = templates or TemplateSet()
    return templates.get(TemplateId.PAD_THOUGHT).body, templates.get(TemplateId.PAD_SUMMARY)
