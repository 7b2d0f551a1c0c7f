"""Iterative self-critique and refinement for long chain-of-thought models."""

from .backend import ChatCompletionsBackend, Completion, Fixture, GenerationRequest, ScriptedBackend, TokenUsage
from .engine import EngineConfig, Problem, SessionTrace, run_probe, run_session
from .evalharness import BenchmarkSpec, pass_at_k, run_benchmark, token_report
from .textproto import Critique, Judgment, extract_boxed_answer, parse_critique, segment_completion
from .verify import Verdict, answers_equivalent, normalize_answer

__version__ = "0.1.0"

__all__ = [
    "BenchmarkSpec",
    "ChatCompletionsBackend",
    "Completion",
    "Critique",
    "EngineConfig",
    "Fixture",
    "GenerationRequest",
    "Judgment",
    "Problem",
    "ScriptedBackend",
    "SessionTrace",
    "TokenUsage",
    "Verdict",
    "answers_equivalent",
    "extract_boxed_answer",
    "normalize_answer",
    "parse_critique",
    "pass_at_k",
    "run_benchmark",
    "run_probe",
    "run_session",
    "segment_completion",
    "token_report",
]
