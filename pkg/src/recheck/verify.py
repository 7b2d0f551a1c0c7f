"""Rule-based answer normalization and equivalence."""

from __future__ import annotations

import decimal
import enum
import math
import re
from dataclasses import dataclass
from fractions import Fraction

__all__ = [
    "AnswerKind",
    "CanonicalAnswer",
    "Verdict",
    "normalize_answer",
    "answers_equivalent",
    "score_answer",
    "DEFAULT_TOLERANCE",
]

DEFAULT_TOLERANCE = 1e-6


class AnswerKind(str, enum.Enum):
    RATIONAL = "Rational"
    DECIMAL = "Decimal"
    SYMBOLIC = "Symbolic"


class Verdict(str, enum.Enum):
    CORRECT_ANSWER = "CorrectAnswer"
    WRONG_ANSWER = "WrongAnswer"
    UNVERIFIABLE = "Unverifiable"


@dataclass(frozen=True)
class CanonicalAnswer:
    kind: AnswerKind
    normalized_text: str
    rational_value: Fraction | None = None
    decimal_value: float | None = None

    @property
    def exact(self) -> Fraction | None:
        if self.rational_value is not None:
            return self.rational_value
        if self.decimal_value is not None:
            return Fraction(self.decimal_value)
        return None


_STRIP_TOKENS = ("$", "\\left", "\\right", "\\,", "\\!")
_FRAC = re.compile(r"\\d?frac\s*\{")
_INT = re.compile(r"[+-]?\d+")
_FRACTION = re.compile(r"([+-]?\d+)/([+-]?\d+)")
_FINITE_DECIMAL = re.compile(r"[+-]?(\d+\.\d*|\.\d+)")
_SCIENTIFIC = re.compile(r"[+-]?(\d+\.?\d*|\.\d+)[eE][+-]?\d+")
_WS = re.compile(r"\s+")
_LOOSE_SPACE = re.compile(r"(?<!\w) | (?!\w)")


def _brace_group(text: str, start: int) -> int | None:
    """Index just past the group opened at ``text[start] == '{'``."""
    depth = 0
    for i in range(start, len(text)):
        if text[i] == "{":
            depth += 1
        elif text[i] == "}":
            depth -= 1
            if depth == 0:
                return i + 1
    return None


def _rewrite_fracs(text: str) -> str:
    while True:
        m = _FRAC.search(text)
        if not m:
            return text
        num_open = m.end() - 1
        num_end = _brace_group(text, num_open)
        if num_end is None or num_end >= len(text) or text[num_end] != "{":
            return text
        den_end = _brace_group(text, num_end)
        if den_end is None:
            return text
        num = text[num_open + 1 : num_end - 1]
        den = text[num_end + 1 : den_end - 1]
        text = f"{text[:m.start()]}{num}/{den}{text[den_end:]}"


def _rational_text(value: Fraction) -> str:
    if value.denominator == 1:
        return str(value.numerator)
    return f"{value.numerator}/{value.denominator}"


def _scientific_text(value: float) -> str:
    d = decimal.Decimal(repr(value)).normalize()
    return f"{d:e}".lower().replace("e+", "e")


def normalize_answer(raw: str) -> CanonicalAnswer:
    """Canonicalize an answer string.

    Integers, fractions and plain decimals become exact rationals;
    exponent-notation numbers become decimals; everything else is kept as
    symbolic text with insignificant whitespace removed. Input that strips
    to nothing (``""``, ``"$ $"``) is the empty symbolic answer.
    """
    text = raw
    # stripping can expose new tokens (e.g. "\\l\\lefteft"), so iterate to a fixed point
    while True:
        before = text
        for token in _STRIP_TOKENS:
            text = text.replace(token, "")
        text = _rewrite_fracs(text)
        text = _LOOSE_SPACE.sub("", _WS.sub(" ", text)).strip()
        if text == before:
            break

    value: Fraction | None = None
    if _INT.fullmatch(text) or _FINITE_DECIMAL.fullmatch(text):
        value = Fraction(text)
    elif m := _FRACTION.fullmatch(text):
        if int(m.group(2)) != 0:
            value = Fraction(int(m.group(1)), int(m.group(2)))
    if value is not None:
        return CanonicalAnswer(AnswerKind.RATIONAL, _rational_text(value), rational_value=value)

    if _SCIENTIFIC.fullmatch(text):
        number = float(text)
        if math.isfinite(number):
            return CanonicalAnswer(AnswerKind.DECIMAL, _scientific_text(number), decimal_value=number)

    return CanonicalAnswer(AnswerKind.SYMBOLIC, text)


def answers_equivalent(
    candidate: CanonicalAnswer,
    truth: CanonicalAnswer,
    tolerance: float = DEFAULT_TOLERANCE,
) -> Verdict:
    """Compare two normalized answers.

    Two rationals compare exactly. When either side is a decimal the
    comparison is numeric within ``tolerance`` relative to the larger
    magnitude. Symbolic answers compare by normalized text.
    """
    if candidate.kind is AnswerKind.RATIONAL and truth.kind is AnswerKind.RATIONAL:
        match = candidate.rational_value == truth.rational_value
    elif AnswerKind.SYMBOLIC not in (candidate.kind, truth.kind):
        a, b = candidate.exact, truth.exact
        match = abs(a - b) <= Fraction(tolerance) * max(abs(a), abs(b))
    else:
        match = candidate.normalized_text == truth.normalized_text
    return Verdict.CORRECT_ANSWER if match else Verdict.WRONG_ANSWER


def score_answer(candidate: str | None, ground_truth: str | None, tolerance: float = DEFAULT_TOLERANCE) -> Verdict:
    """Score an extracted answer (``None`` when extraction failed) against the ground truth."""
    if candidate is None or not ground_truth or not ground_truth.strip():
        return Verdict.UNVERIFIABLE
    if candidate == "":
        return Verdict.WRONG_ANSWER
    return answers_equivalent(normalize_answer(candidate), normalize_answer(ground_truth), tolerance)
