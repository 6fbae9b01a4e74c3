"""Model backends, answer parsing and the resumable experiment runner."""

import json
import logging
import os
import re
import threading
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import openai

from .corpus import Corpus, SignalTask
from .prompts import (
    CompiledPrompt,
    Configuration,
    FewShotBank,
    FewShotUnavailableError,
    ParseMode,
    ParsePlan,
    PromptTemplates,
    compile_prompt,
)

LOGGER = logging.getLogger(__name__)

JOURNAL_NAME = "journal.jsonl"
PREDICTIONS_NAME = "predictions.jsonl"

DIRECT = "direct"
LOGIT_FALLBACK = "logit_fallback"
ABSTAIN = "abstain"
TRANSPORT_ERROR = "transport_error"

UNPARSEABLE = "unparseable"
LOGPROBS_MISSING = "logprobs_missing"
FEW_SHOT_UNAVAILABLE = "few_shot_unavailable"


class InferenceError(Exception):
    """Exception raised for backend and journal errors."""

    pass


class TransportError(InferenceError):
    """Raised when a backend cannot be reached after retries."""

    pass


class BackendError(InferenceError):
    """Raised when a backend answers with a non-success status."""

    pass


@dataclass(frozen=True)
class BackendConfig:
    """Connection settings of one OpenAI-compatible endpoint."""

    endpoint_url: str
    model_name: str
    api_key_env: Optional[str] = None
    api_key: Optional[str] = None
    max_in_flight: int = 4
    timeout_s: float = 60.0
    max_attempts: int = 3
    max_tokens: int = 128
    top_logprobs: int = 20

    def __post_init__(self) -> None:
        if self.max_in_flight < 1:
            raise InferenceError(f"max_in_flight must be at least 1, got {self.max_in_flight}")
        if self.timeout_s <= 0:
            raise InferenceError(f"timeout_s must be positive, got {self.timeout_s}")
        if self.max_attempts < 1:
            raise InferenceError(f"max_attempts must be at least 1, got {self.max_attempts}")

    def resolve_api_key(self) -> str:
        if self.api_key:
            return self.api_key
        if self.api_key_env:
            value = os.environ.get(self.api_key_env)
            if not value:
                raise InferenceError(f"Environment variable '{self.api_key_env}' is not set")
            return value
        # local servers usually accept any key
        return "none"


@dataclass(frozen=True)
class GenerationResponse:
    text: str
    candidate_logprobs: Optional[Dict[str, float]] = None
    usage: Dict[str, int] = field(default_factory=dict)
    logprobs_truncated: bool = False


@dataclass
class PredictionRecord:
    """One answer for one (slice, task, configuration) key."""

    visit_id: str
    slice_index: int
    signal_id: str
    config_id: str
    prediction: Optional[int]
    parse_status: str
    raw_text: str = ""
    positive_logprob: Optional[float] = None
    negative_logprob: Optional[float] = None
    abstain_reason: Optional[str] = None
    timestamp: Optional[str] = None

    @property
    def key(self) -> Tuple[str, int, str, str]:
        return (self.visit_id, self.slice_index, self.signal_id, self.config_id)

    def to_dict(self, with_timestamp: bool = True) -> Dict:
        data = asdict(self)
        if not with_timestamp:
            data.pop("timestamp")
        return data

    @classmethod
    def from_dict(cls, data: Mapping) -> "PredictionRecord":
        return cls(
            visit_id=str(data["visit_id"]),
            slice_index=int(data["slice_index"]),
            signal_id=data["signal_id"],
            config_id=data["config_id"],
            prediction=data.get("prediction"),
            parse_status=data["parse_status"],
            raw_text=data.get("raw_text", ""),
            positive_logprob=data.get("positive_logprob"),
            negative_logprob=data.get("negative_logprob"),
            abstain_reason=data.get("abstain_reason"),
            timestamp=data.get("timestamp"),
        )


class Backend:
    """Base class: bounds concurrent requests and exposes :meth:`generate`."""

    def __init__(self, name: str, max_in_flight: int = 1):
        self.name = name
        self.max_in_flight = max_in_flight
        self._slots = threading.BoundedSemaphore(max_in_flight)

    def generate(self, prompt: CompiledPrompt) -> GenerationResponse:
        with self._slots:
            return self._complete(prompt)

    def _complete(self, prompt: CompiledPrompt) -> GenerationResponse:
        raise NotImplementedError


def _normalize_token(token: str) -> str:
    return token.strip().lower()


class OpenAIBackend(Backend):
    """Chat-completions backend with greedy decoding and first-token log-probabilities."""

    def __init__(self, config: BackendConfig, name: Optional[str] = None):
        super().__init__(name or config.model_name, config.max_in_flight)
        self.config = config
        self.client = openai.OpenAI(
            base_url=config.endpoint_url,
            api_key=config.resolve_api_key(),
            timeout=config.timeout_s,
            max_retries=config.max_attempts - 1,
        )

    def _complete(self, prompt: CompiledPrompt) -> GenerationResponse:
        params = {
            "model": self.config.model_name,
            "messages": [{"role": "user", "content": prompt.full_text}],
            "temperature": 0,
            "max_tokens": self.config.max_tokens,
        }
        if prompt.parse_plan.logit_fallback:
            params.update(logprobs=True, top_logprobs=self.config.top_logprobs)

        try:
            completion = self.client.chat.completions.create(**params)
        except openai.APIConnectionError as e:
            raise TransportError(
                f"{self.name}: no response from {self.config.endpoint_url} after "
                f"{self.config.max_attempts} attempts ({e})"
            )
        except openai.APIStatusError as e:
            excerpt = (e.response.text if e.response is not None else str(e))[:200]
            raise BackendError(f"{self.name}: HTTP {e.status_code}: {excerpt}")

        choice = completion.choices[0]
        logprobs, truncated = self._candidate_logprobs(choice, prompt.candidate_tokens)
        usage = completion.usage.model_dump() if completion.usage is not None else {}
        return GenerationResponse(
            text=choice.message.content or "",
            candidate_logprobs=logprobs,
            usage={k: v for k, v in usage.items() if isinstance(v, int)},
            logprobs_truncated=truncated,
        )

    @staticmethod
    def _candidate_logprobs(
        choice, candidates: Tuple[str, str]
    ) -> Tuple[Optional[Dict[str, float]], bool]:
        """Log-probabilities of both candidates at the first generated token.

        Returns (None, True) when the top-k alternatives miss a candidate.
        """
        content = getattr(choice.logprobs, "content", None) if choice.logprobs else None
        if not content:
            return None, False
        first = content[0]
        seen: Dict[str, float] = {}
        alternatives = [(first.token, first.logprob)] + [
            (alt.token, alt.logprob) for alt in (first.top_logprobs or [])
        ]
        for token, logprob in alternatives:
            token = _normalize_token(token)
            if token in candidates:
                seen[token] = max(logprob, seen.get(token, float("-inf")))
        if all(c in seen for c in candidates):
            return {c: seen[c] for c in candidates}, False
        return None, True


@dataclass(frozen=True)
class MockRule:
    pattern: str
    response_text: str
    logprobs: Optional[Dict[str, float]] = None

    def matches(self, text: str) -> bool:
        if "*" in self.pattern:
            regex = ".*".join(re.escape(part) for part in self.pattern.split("*"))
            return re.fullmatch(regex, text, flags=re.DOTALL) is not None
        return self.pattern in text


class MockBackend(Backend):
    """Deterministic rule-driven backend for tests and dry runs.

    Patterns are literal substrings, or anchored wildcards when they contain
    ``*``. The first matching rule wins; otherwise ``default`` answers.
    """

    def __init__(
        self,
        rules: Sequence[MockRule] = (),
        default: Optional[MockRule] = None,
        max_in_flight: int = 4,
        name: str = "mock",
    ):
        super().__init__(name, max_in_flight)
        self.rules = list(rules)
        self.default = default or MockRule("*", "")
        self.calls = 0
        self._lock = threading.Lock()

    def _complete(self, prompt: CompiledPrompt) -> GenerationResponse:
        with self._lock:
            self.calls += 1
        rule = next((r for r in self.rules if r.matches(prompt.full_text)), self.default)
        logprobs = None
        if rule.logprobs is not None:
            logprobs = {_normalize_token(k): float(v) for k, v in rule.logprobs.items()}
        truncated = logprobs is not None and not all(c in logprobs for c in prompt.candidate_tokens)
        return GenerationResponse(
            text=rule.response_text,
            candidate_logprobs=None if truncated else logprobs,
            logprobs_truncated=truncated,
        )

    @staticmethod
    def _rule(entry: Mapping) -> MockRule:
        try:
            return MockRule(
                pattern=entry.get("pattern", "*"),
                response_text=entry.get("response_text", ""),
                logprobs=entry.get("logprobs"),
            )
        except AttributeError:
            raise InferenceError(f"Mock rule must be an object, got {entry!r}")

    @classmethod
    def from_file(cls, path: str, max_in_flight: int = 4) -> "MockBackend":
        """Load rules from JSON: a list of rules, or {"rules": [...], "default": {...}}."""
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except FileNotFoundError:
            raise InferenceError(f"Mock rule file '{path}' not found")
        except json.JSONDecodeError as e:
            raise InferenceError(f"Mock rule file '{path}' is not valid JSON: {e.msg}")

        if isinstance(data, list):
            entries, default = data, None
        else:
            entries, default = data.get("rules", []), data.get("default")
        return cls(
            [cls._rule(e) for e in entries],
            cls._rule(default) if default is not None else None,
            max_in_flight=max_in_flight,
        )


def generate(backend: Backend, prompt: CompiledPrompt) -> GenerationResponse:
    """Send one compiled prompt to a backend."""
    return backend.generate(prompt)


_WORD = re.compile(r"[A-Za-z]+")
_INTEGER = re.compile(r"\d+")


def _candidates_for(plan: ParsePlan) -> Tuple[str, str]:
    return ("yes", "no") if plan.mode == ParseMode.LEADING_YES_NO else ("1", "0")


def parse_prediction(
    response: GenerationResponse, plan: ParsePlan
) -> Tuple[Optional[int], str, Optional[str]]:
    """Turn a response into (prediction, parse_status, abstain_reason).

    The leading yes/no word or the first integer decides when it is a
    candidate answer. Otherwise the larger of the two candidate
    log-probabilities decides, ties going to the negative class. Without
    either the result is an abstention.
    """
    positive, negative = _candidates_for(plan)
    text = response.text or ""

    pattern = _WORD if plan.mode == ParseMode.LEADING_YES_NO else _INTEGER
    match = pattern.search(text)
    if match:
        token = match.group(0).lower()
        if token == positive:
            return 1, DIRECT, None
        if token == negative:
            return 0, DIRECT, None

    logprobs = response.candidate_logprobs
    if plan.logit_fallback and logprobs and positive in logprobs and negative in logprobs:
        return int(logprobs[positive] > logprobs[negative]), LOGIT_FALLBACK, None

    reason = LOGPROBS_MISSING if response.logprobs_truncated else UNPARSEABLE
    return None, ABSTAIN, reason


class PredictionJournal:
    """Append-only JSON Lines journal of prediction records."""

    def __init__(self, path: str):
        self.path = path
        self._lock = threading.Lock()

    def load(self) -> Dict[Tuple[str, int, str, str], PredictionRecord]:
        """Records by key, later lines winning. A torn final line is cut off."""
        records: Dict[Tuple[str, int, str, str], PredictionRecord] = {}
        if not os.path.exists(self.path):
            return records

        with open(self.path, "rb") as f:
            lines = f.read().splitlines(keepends=True)
        good_end = 0
        for number, line in enumerate(lines, start=1):
            last = number == len(lines)
            try:
                if not line.endswith(b"\n"):
                    raise ValueError("unterminated line")
                if line.strip():
                    record = PredictionRecord.from_dict(json.loads(line))
                    records[record.key] = record
            except (ValueError, KeyError) as e:
                if not last:
                    raise InferenceError(f"{self.path}, line {number}: corrupt journal entry ({e})")
                LOGGER.warning("Discarding torn final journal line %d", number)
                with open(self.path, "r+b") as f:
                    f.truncate(good_end)
                break
            good_end += len(line)
        return records

    def append(self, record: PredictionRecord) -> None:
        line = json.dumps(record.to_dict(), sort_keys=True)
        with self._lock:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(line + "\n")
                f.flush()


def write_predictions(records: Iterable[PredictionRecord], path: str) -> None:
    """Write records sorted by key, without timestamps."""
    with open(path, "w", encoding="utf-8") as f:
        for record in sorted(records, key=lambda r: r.key):
            f.write(json.dumps(record.to_dict(with_timestamp=False), sort_keys=True) + "\n")


def read_predictions(path: str) -> List[PredictionRecord]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return [PredictionRecord.from_dict(json.loads(line)) for line in f if line.strip()]
    except FileNotFoundError:
        raise InferenceError(f"Prediction file '{path}' not found; run the experiment first")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _record(
    slice_key: Tuple[str, int],
    prompt: CompiledPrompt,
    prediction: Optional[int],
    status: str,
    response: Optional[GenerationResponse] = None,
    raw_text: str = "",
    reason: Optional[str] = None,
) -> PredictionRecord:
    positive, negative = prompt.candidate_tokens
    logprobs = (response.candidate_logprobs if response else None) or {}
    return PredictionRecord(
        visit_id=slice_key[0],
        slice_index=slice_key[1],
        signal_id=prompt.signal_id,
        config_id=prompt.config_id,
        prediction=prediction,
        parse_status=status,
        raw_text=response.text if response else raw_text,
        positive_logprob=logprobs.get(positive),
        negative_logprob=logprobs.get(negative),
        abstain_reason=reason,
        timestamp=_now(),
    )


def _call(backend: Backend, slice_key: Tuple[str, int], prompt: CompiledPrompt) -> PredictionRecord:
    try:
        response = generate(backend, prompt)
    except InferenceError as e:
        LOGGER.warning("%s/%s %s %s: %s", slice_key[0], slice_key[1], prompt.signal_id, prompt.config_id, e)
        return _record(slice_key, prompt, None, TRANSPORT_ERROR, raw_text=str(e))
    prediction, status, reason = parse_prediction(response, prompt.parse_plan)
    return _record(slice_key, prompt, prediction, status, response, reason=reason)


@dataclass
class ExperimentResult:
    records: List[PredictionRecord]
    new_calls: int
    status_counts: Dict[str, int]

    @property
    def transport_errors(self) -> int:
        return self.status_counts.get(TRANSPORT_ERROR, 0)


def run_experiment(
    corpus: Corpus,
    configs: Sequence[Configuration],
    tasks: Sequence[SignalTask],
    backends: Mapping[str, Backend],
    run_dir: str,
    bank: Optional[FewShotBank] = None,
    k_per_class: int = 1,
    seed: int = 0,
    templates: Optional[PromptTemplates] = None,
    progress: Optional[Callable[[int], None]] = None,
) -> ExperimentResult:
    """Predict every labeled (slice, task) for every configuration.

    Records are journaled as they complete. Keys already in the journal are
    skipped unless they ended in a transport error. The sorted prediction
    file is rewritten at the end.

    Args:
        corpus: Sliced, labeled corpus
        configs: Configurations to run
        tasks: Signal tasks to run
        backends: Backend per dialect name (``flan``, ``gemma``, ``llama``)
        run_dir: Directory holding the journal and the prediction file
        bank: Few-shot bank, required for few-shot configurations
        k_per_class: Few-shot examples per class
        seed: Few-shot selection seed
        templates: Prompt text overrides
        progress: Called with the number of newly completed keys
    """
    missing = sorted({c.dialect.name for c in configs} - set(backends))
    if missing:
        raise InferenceError(f"No backend configured for dialects: {', '.join(missing)}")

    os.makedirs(run_dir, exist_ok=True)
    journal = PredictionJournal(os.path.join(run_dir, JOURNAL_NAME))
    records = journal.load()
    finished = {k for k, r in records.items() if r.parse_status != TRANSPORT_ERROR}
    if records:
        LOGGER.info("Resuming from journal with %d finished keys", len(finished))

    pending = []
    for config in configs:
        for task in tasks:
            for slice_ in corpus.labeled_slices(task):
                key = (slice_.visit_id, slice_.slice_index, task.signal_id, config.config_id)
                if key not in finished:
                    pending.append((key, config, task, slice_))
    pending.sort(key=lambda item: item[0])

    calls = 0
    workers = sum(backends[name].max_in_flight for name in {c.dialect.name for c in configs})
    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        futures = []
        for key, config, task, slice_ in pending:
            try:
                prompt = compile_prompt(config, task, slice_, bank, k_per_class, seed, templates)
            except FewShotUnavailableError as e:
                LOGGER.info("%s", e)
                record = PredictionRecord(
                    *key, prediction=None, parse_status=ABSTAIN, raw_text="",
                    abstain_reason=FEW_SHOT_UNAVAILABLE, timestamp=_now(),
                )
                journal.append(record)
                records[key] = record
                if progress:
                    progress(1)
                continue
            futures.append(executor.submit(_call, backends[config.dialect.name], slice_.key, prompt))
            calls += 1

        # single writer: only this thread touches the journal
        for future in as_completed(futures):
            record = future.result()
            journal.append(record)
            records[record.key] = record
            if progress:
                progress(1)

    write_predictions(records.values(), os.path.join(run_dir, PREDICTIONS_NAME))
    counts: Dict[str, int] = {}
    for record in records.values():
        counts[record.parse_status] = counts.get(record.parse_status, 0) + 1
    return ExperimentResult(sorted(records.values(), key=lambda r: r.key), calls, counts)
