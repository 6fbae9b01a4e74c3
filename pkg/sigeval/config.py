"""TOML run configuration."""

import logging
import os
import re
from dataclasses import dataclass, field, fields, replace
from typing import Any, Dict, List, Mapping, Optional, Tuple

from .corpus import (
    DEFAULT_MIN_WORDS,
    DEFAULT_SLICE_LEN_S,
    SIGNAL_TASKS,
    Corpus,
    SignalTask,
    SignalType,
    get_task,
    ingest_transcripts,
    load_labels,
    load_metadata,
    CorpusError,
)
from .inference import Backend, BackendConfig, MockBackend, OpenAIBackend
from .prompts import (
    DIALECTS,
    Configuration,
    FewShotBank,
    PromptError,
    PromptTemplates,
    get_configuration,
    valid_configurations,
)
from .utils import load_toml

LOGGER = logging.getLogger(__name__)

_SECRET_REF = re.compile(r"^\$\{([A-Za-z_][A-Za-z0-9_]*)\}$")
BACKEND_KINDS = ("openai", "mock")


class ConfigError(Exception):
    """Exception raised for unreadable or invalid configuration."""

    pass


@dataclass(frozen=True)
class PathsConfig:
    transcripts: Optional[str] = None
    labels: Optional[str] = None
    metadata: Optional[str] = None
    lexicon: Optional[str] = None
    few_shot_bank: Optional[str] = None
    prompt_templates: Optional[str] = None
    run_dir: str = "run"


@dataclass(frozen=True)
class BackendSettings:
    kind: str = "openai"
    endpoint_url: Optional[str] = None
    model_name: Optional[str] = None
    api_key_env: Optional[str] = None
    api_key: Optional[str] = None
    max_in_flight: int = 4
    timeout_s: float = 60.0
    max_attempts: int = 3
    max_tokens: int = 128
    top_logprobs: int = 20
    rules: Optional[str] = None


@dataclass(frozen=True)
class AnalysisConfig:
    quantile: float = 0.25
    ensemble_lambda: float = 0.1
    ensemble_penalty: str = "l1"
    strict_abstain: bool = False
    few_shot_k: int = 1
    type1_low_max: float = 2.0
    type1_high_min: float = 5.0
    type2_low_max: float = 1.0
    type2_high_min: float = 3.0
    glmm_max_iter: int = 200

    @property
    def few_shot_extremes(self) -> Dict[SignalType, Tuple[float, float]]:
        return {
            SignalType.TYPE_I: (self.type1_low_max, self.type1_high_min),
            SignalType.TYPE_II: (self.type2_low_max, self.type2_high_min),
        }


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs, with paths resolved against the config file."""

    seed: Optional[int] = None
    paths: PathsConfig = field(default_factory=PathsConfig)
    slice_len_s: float = DEFAULT_SLICE_LEN_S
    min_words: int = DEFAULT_MIN_WORDS
    backends: Dict[str, BackendSettings] = field(default_factory=dict)
    config_filter: Tuple[str, ...] = ()
    task_filter: Tuple[str, ...] = ()
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    source: Optional[str] = None

    def selected_configs(self) -> List[Configuration]:
        """Configurations to run, in report order."""
        if not self.config_filter:
            return valid_configurations()
        try:
            wanted = {get_configuration(c).config_id for c in self.config_filter}
        except PromptError as e:
            raise ConfigError(str(e))
        return [c for c in valid_configurations() if c.config_id in wanted]

    def selected_tasks(self) -> List[SignalTask]:
        if not self.task_filter:
            return list(SIGNAL_TASKS)
        try:
            wanted = {get_task(t).signal_id for t in self.task_filter}
        except CorpusError as e:
            raise ConfigError(str(e))
        return [t for t in SIGNAL_TASKS if t.signal_id in wanted]

    def validate(self) -> List[str]:
        """Problems that would stop a run, as messages; empty when clean."""
        problems = []
        if self.seed is None:
            problems.append("seed is not set (use 'seed = <int>' or --seed)")
        for name in ("transcripts", "labels"):
            if getattr(self.paths, name) is None:
                problems.append(f"paths.{name} is not set")
        for item in fields(PathsConfig):
            value = getattr(self.paths, item.name)
            if item.name != "run_dir" and value is not None and not os.path.isfile(value):
                problems.append(f"paths.{item.name}: file '{value}' does not exist")

        try:
            configs = self.selected_configs()
            self.selected_tasks()
        except ConfigError as e:
            problems.append(str(e))
            configs = []
        for dialect in sorted({c.dialect.name for c in configs}):
            settings = self.backends.get(dialect)
            if settings is None:
                problems.append(f"backends.{dialect} is not configured")
            elif settings.kind == "openai" and not (settings.endpoint_url and settings.model_name):
                problems.append(f"backends.{dialect} needs endpoint_url and model_name")
            elif settings.kind == "mock" and settings.rules and not os.path.isfile(settings.rules):
                problems.append(f"backends.{dialect}.rules: file '{settings.rules}' does not exist")
        if self.analysis.ensemble_penalty not in ("l1", "l2"):
            problems.append(f"analysis.ensemble_penalty must be 'l1' or 'l2', got '{self.analysis.ensemble_penalty}'")
        if not 0 < self.analysis.quantile < 0.5:
            problems.append(f"analysis.quantile must lie in (0, 0.5), got {self.analysis.quantile}")
        return problems

    def build_backends(self, max_in_flight: Optional[int] = None) -> Dict[str, Backend]:
        """One backend per configured dialect."""
        backends: Dict[str, Backend] = {}
        for dialect, settings in sorted(self.backends.items()):
            in_flight = max_in_flight or settings.max_in_flight
            if settings.kind == "mock":
                if settings.rules:
                    backend = MockBackend.from_file(settings.rules, max_in_flight=in_flight)
                else:
                    backend = MockBackend(max_in_flight=in_flight)
                backend.name = f"mock-{dialect}"
            else:
                backend = OpenAIBackend(
                    BackendConfig(
                        endpoint_url=settings.endpoint_url,
                        model_name=settings.model_name,
                        api_key_env=settings.api_key_env,
                        api_key=settings.api_key,
                        max_in_flight=in_flight,
                        timeout_s=settings.timeout_s,
                        max_attempts=settings.max_attempts,
                        max_tokens=settings.max_tokens,
                        top_logprobs=settings.top_logprobs,
                    ),
                    name=dialect,
                )
            backends[dialect] = backend
        return backends

    def load_corpus(self) -> Corpus:
        """Ingest, slice and label the corpus named in ``paths``."""
        if self.paths.transcripts is None:
            raise ConfigError("paths.transcripts is not set")
        visits = ingest_transcripts(self.paths.transcripts)
        labels = load_labels(self.paths.labels) if self.paths.labels else []
        metadata = load_metadata(self.paths.metadata) if self.paths.metadata else {}
        return Corpus.build(visits, labels, metadata, self.slice_len_s, self.min_words)

    def load_bank(self, corpus: Corpus) -> FewShotBank:
        if self.paths.few_shot_bank:
            return FewShotBank.load(self.paths.few_shot_bank)
        return FewShotBank.from_corpus(corpus, self.analysis.few_shot_extremes)

    def load_templates(self) -> Optional[PromptTemplates]:
        if self.paths.prompt_templates:
            return PromptTemplates.from_file(self.paths.prompt_templates)
        return None


def _resolve_path(base_dir: str, value: Any, key: str) -> Optional[str]:
    if value is None:
        return None
    if not isinstance(value, str):
        raise ConfigError(f"{key} must be a string path")
    if "${" in value:
        raise ConfigError(f"{key}: environment interpolation is only allowed for api_key")
    return os.path.normpath(os.path.join(base_dir, os.path.expanduser(value)))


def _interpolate_secret(value: Optional[str], key: str) -> Optional[str]:
    if value is None:
        return None
    match = _SECRET_REF.match(value)
    if not match:
        if "${" in value:
            raise ConfigError(f"{key}: malformed ${{VAR}} reference")
        return value
    resolved = os.environ.get(match.group(1))
    if resolved is None:
        raise ConfigError(f"{key}: environment variable '{match.group(1)}' is not set")
    return resolved


def _build(cls, data: Mapping[str, Any], section: str):
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"Unknown keys in [{section}]: {', '.join(sorted(unknown))}")
    try:
        return cls(**data)
    except TypeError as e:
        raise ConfigError(f"Invalid [{section}] section: {e}")


def load_config(path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Read a TOML run configuration and apply command-line overrides.

    Args:
        path: Config file; None gives defaults relative to the working directory
        overrides: ``seed``, ``run_dir`` or ``configs`` values taking precedence over the file

    Raises:
        ConfigError: If the file is unreadable, not TOML or holds invalid values
    """
    data: Dict[str, Any] = {}
    base_dir = os.getcwd()
    if path is not None:
        try:
            data = load_toml(path)
        except OSError as e:
            raise ConfigError(f"Cannot read config '{path}': {e}")
        except ValueError as e:
            raise ConfigError(f"Config '{path}' is not valid TOML: {e}")
        base_dir = os.path.dirname(os.path.abspath(path))

    known = {"seed", "paths", "corpus", "backends", "filters", "analysis"}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"Unknown top-level keys: {', '.join(sorted(unknown))}")

    raw_paths = dict(data.get("paths", {}))
    raw_paths.setdefault("run_dir", "run")
    paths = _build(
        PathsConfig,
        {k: _resolve_path(base_dir, v, f"paths.{k}") for k, v in raw_paths.items()},
        "paths",
    )

    backends = {}
    for dialect, raw in data.get("backends", {}).items():
        if dialect not in DIALECTS:
            raise ConfigError(f"Unknown dialect '{dialect}' in [backends]. Choose from: {', '.join(DIALECTS)}")
        raw = dict(raw)
        raw["api_key"] = _interpolate_secret(raw.get("api_key"), f"backends.{dialect}.api_key")
        if raw.get("rules") is not None:
            raw["rules"] = _resolve_path(base_dir, raw["rules"], f"backends.{dialect}.rules")
        settings = _build(BackendSettings, raw, f"backends.{dialect}")
        if settings.kind not in BACKEND_KINDS:
            raise ConfigError(f"backends.{dialect}.kind must be one of {', '.join(BACKEND_KINDS)}")
        backends[dialect] = settings

    corpus_section = data.get("corpus", {})
    filters = data.get("filters", {})
    config = RunConfig(
        seed=data.get("seed"),
        paths=paths,
        slice_len_s=float(corpus_section.get("slice_len_s", DEFAULT_SLICE_LEN_S)),
        min_words=int(corpus_section.get("min_words", DEFAULT_MIN_WORDS)),
        backends=backends,
        config_filter=tuple(filters.get("configs", ())),
        task_filter=tuple(filters.get("tasks", ())),
        analysis=_build(AnalysisConfig, data.get("analysis", {}), "analysis"),
        source=path,
    )
    if config.seed is not None and not isinstance(config.seed, int):
        raise ConfigError(f"seed must be an integer, got {config.seed!r}")

    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    if "seed" in overrides:
        config = replace(config, seed=int(overrides["seed"]))
    if "run_dir" in overrides:
        config = replace(config, paths=replace(config.paths, run_dir=os.path.abspath(overrides["run_dir"])))
    if "configs" in overrides:
        config = replace(config, config_filter=tuple(overrides["configs"]))
    LOGGER.debug("Loaded configuration from %s", path or "defaults")
    return config
