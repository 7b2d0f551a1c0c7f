"""Run configuration: a YAML file with ``${VAR}`` interpolation, overridden by CLI flags."""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .backend import ChatCompletionsBackend, Fixture, ScriptedBackend
from .curate import CurationConfig
from .engine import EngineConfig, SamplingParams
from .textproto import TemplateSet


class ConfigError(ValueError):
    pass


_ENV_REF = re.compile(r"\$\{(\w+)\}")


def interpolate_env(value: Any, environ: dict[str, str] | None = None) -> Any:
    """Replace ``${NAME}`` in every string of a nested structure."""
    environ = os.environ if environ is None else environ
    if isinstance(value, str):
        def sub(m: re.Match) -> str:
            if m.group(1) not in environ:
                raise ConfigError(f"environment variable {m.group(1)} is not set")
            return environ[m.group(1)]
        return _ENV_REF.sub(sub, value)
    if isinstance(value, dict):
        return {k: interpolate_env(v, environ) for k, v in value.items()}
    if isinstance(value, list):
        return [interpolate_env(v, environ) for v in value]
    return value


@dataclass
class BackendSettings:
    kind: str = "live"
    base_url: str | None = None
    base_url_env: str = "DC_BASE_URL"
    api_key_env: str = "DC_API_KEY"
    fixture: str | None = None
    timeout: float = 600.0
    max_retries: int = 4
    # model ids for the policy under test and the curation teacher/critic/refiner
    policy_model: str = ""
    teacher_model: str = ""
    critic_model: str = ""
    refiner_model: str = ""
    filter_model: str = ""


@dataclass
class EngineSettings:
    max_rounds: int = 3
    temperature: float = 0.6
    top_p: float = 1.0
    max_tokens: int = 32768
    summary_role: str = "user"


@dataclass
class CurationSettings:
    k: int = 4
    min_incorrect: int = 2
    resample_budget: int = 2
    round2: bool = False


@dataclass
class RunConfig:
    backend: BackendSettings = field(default_factory=BackendSettings)
    engine: EngineSettings = field(default_factory=EngineSettings)
    curation: CurationSettings = field(default_factory=CurationSettings)
    templates_dir: str | None = None
    template_version: str = "v1"
    max_in_flight: int = 1
    seed: int | None = None

    # -- loading ---------------------------------------------------------

    @classmethod
    def from_dict(cls, data: dict) -> RunConfig:
        data = dict(data or {})
        sections = {"backend": BackendSettings, "engine": EngineSettings, "curation": CurationSettings}
        kwargs: dict[str, Any] = {}
        for key, value in data.items():
            if key in sections:
                kwargs[key] = _build(sections[key], value or {}, key)
            elif key in {f.name for f in fields(cls)}:
                kwargs[key] = value
            else:
                raise ConfigError(f"unknown config key {key!r}")
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path | None, environ: dict[str, str] | None = None) -> RunConfig:
        if path is None:
            return cls()
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict(interpolate_env(raw, environ))

    # -- validation and wiring -------------------------------------------

    def validate(self, environ: dict[str, str] | None = None, needs: tuple[str, ...] = ("policy",)) -> None:
        """Check everything a command needs before any backend call is made."""
        environ = os.environ if environ is None else environ
        if self.max_in_flight < 1:
            raise ConfigError("max_in_flight must be >= 1")
        if self.engine.max_rounds < 0:
            raise ConfigError("max_rounds must be >= 0")
        if self.engine.summary_role not in ("user", "assistant"):
            raise ConfigError("engine.summary_role must be 'user' or 'assistant'")
        if self.templates_dir is not None and not Path(self.templates_dir).is_dir():
            raise ConfigError(f"templates directory {self.templates_dir} does not exist")
        b = self.backend
        if b.kind == "scripted":
            if not b.fixture:
                raise ConfigError("scripted backend needs --fixture")
            if not Path(b.fixture).exists():
                raise ConfigError(f"fixture {b.fixture} does not exist")
        elif b.kind == "live":
            if not (b.base_url or environ.get(b.base_url_env)):
                raise ConfigError(f"live backend needs a base URL ({b.base_url_env} or backend.base_url)")
            for role in needs:
                if not self.model_for(role):
                    raise ConfigError(f"no model id configured for {role}")
        else:
            raise ConfigError(f"unknown backend kind {b.kind!r}")

    def model_for(self, role: str) -> str:
        b = self.backend
        model = getattr(b, f"{role}_model", "")
        if not model and role in ("teacher", "critic", "refiner", "filter"):
            model = b.teacher_model or b.policy_model
        if not model and b.kind == "scripted":
            model = "scripted"
        return model

    def make_backend(self, environ: dict[str, str] | None = None):
        environ = os.environ if environ is None else environ
        b = self.backend
        if b.kind == "scripted":
            return ScriptedBackend(Fixture.load(b.fixture))
        return ChatCompletionsBackend(
            b.base_url or environ.get(b.base_url_env),
            environ.get(b.api_key_env),
            timeout=b.timeout,
            max_retries=b.max_retries,
        )

    def templates(self) -> TemplateSet:
        return TemplateSet(self.templates_dir, self.template_version)

    def sampling(self, role: str = "policy") -> SamplingParams:
        e = self.engine
        return SamplingParams(e.temperature, e.top_p, e.max_tokens, self.seed, self.model_for(role))

    def engine_config(self) -> EngineConfig:
        return EngineConfig(self.engine.max_rounds, self.sampling("policy"), self.templates(),
                            summary_role=self.engine.summary_role)

    def curation_config(self) -> CurationConfig:
        c = self.curation
        return CurationConfig(
            k=c.k,
            min_incorrect=c.min_incorrect,
            resample_budget=c.resample_budget,
            round2=c.round2,
            max_in_flight=self.max_in_flight,
            teacher=self.sampling("teacher"),
            critic=self.sampling("critic"),
            refiner=self.sampling("refiner"),
            templates=self.templates(),
        )


def _build(cls, values: dict, section: str):
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {', '.join(sorted(unknown))}")
    return cls(**values)
