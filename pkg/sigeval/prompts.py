"""Prompt compilation for every valid model dialect and prompting strategy."""

import json
import logging
import zlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .corpus import Corpus, Slice, SignalTask, SignalType, Speaker, get_task
from .utils import load_toml

LOGGER = logging.getLogger(__name__)


class PromptError(Exception):
    """Exception raised for prompt compilation errors."""

    pass


class FewShotUnavailableError(PromptError):
    """Raised when a class has no eligible few-shot example for a task."""

    pass


class PromptStrategy(str, Enum):
    ZS = "ZS"
    FS = "FS"
    COT = "COT"
    FSCOT = "FSCOT"

    @property
    def uses_examples(self) -> bool:
        return self in (PromptStrategy.FS, PromptStrategy.FSCOT)

    @property
    def uses_reasoning(self) -> bool:
        return self in (PromptStrategy.COT, PromptStrategy.FSCOT)


class AnswerStyle(str, Enum):
    YES_NO = "yes_no"
    NUMERIC = "numeric"


class ParseMode(str, Enum):
    LEADING_YES_NO = "leading_yes_no"
    LEADING_INTEGER = "leading_integer"


@dataclass(frozen=True)
class ModelDialect:
    """Prompt conventions a model family responds to reliably."""

    name: str
    label: str
    answer_style: AnswerStyle
    supports_reasoning: bool
    supports_fs_reasoning: bool

    def supports(self, strategy: PromptStrategy) -> bool:
        if strategy == PromptStrategy.COT:
            return self.supports_reasoning
        if strategy == PromptStrategy.FSCOT:
            return self.supports_fs_reasoning
        return True

    @property
    def candidate_tokens(self) -> Tuple[str, str]:
        """(positive, negative) answer tokens."""
        if self.answer_style == AnswerStyle.YES_NO:
            return ("yes", "no")
        return ("1", "0")


DIALECTS: Dict[str, ModelDialect] = {
    "flan": ModelDialect("flan", "FLAN", AnswerStyle.YES_NO, False, False),
    "gemma": ModelDialect("gemma", "Gemma", AnswerStyle.YES_NO, True, False),
    "llama": ModelDialect("llama", "LLaMA", AnswerStyle.NUMERIC, True, True),
}


def get_dialect(name: str) -> ModelDialect:
    try:
        return DIALECTS[name.lower()]
    except KeyError:
        raise PromptError(f"Unknown model dialect '{name}'")


@dataclass(frozen=True)
class Configuration:
    """A (model dialect, prompting strategy) pair."""

    dialect: ModelDialect
    strategy: PromptStrategy

    @property
    def config_id(self) -> str:
        return f"{self.dialect.label}-{self.strategy.value}"

    @property
    def model(self) -> str:
        return self.dialect.label

    def __str__(self) -> str:
        return self.config_id


def valid_configurations() -> List[Configuration]:
    """The nine evaluated configurations in report column order."""
    return [
        Configuration(dialect, strategy)
        for dialect in DIALECTS.values()
        for strategy in PromptStrategy
        if dialect.supports(strategy)
    ]


def get_configuration(config_id: str) -> Configuration:
    """Look up a configuration by its id (e.g. ``LLaMA-FSCOT``), case-insensitively."""
    for config in valid_configurations():
        if config.config_id.lower() == config_id.lower():
            return config
    raise PromptError(f"Unknown or unsupported configuration '{config_id}'")


@dataclass(frozen=True)
class ParsePlan:
    """How a response to a compiled prompt is turned into a prediction."""

    mode: ParseMode
    reasoning_expected: bool
    logit_fallback: bool = True


@dataclass(frozen=True)
class CompiledPrompt:
    """Exact prompt text plus what is needed to parse its answer."""

    full_text: str
    parse_plan: ParsePlan
    candidate_tokens: Tuple[str, str]
    config_id: str
    signal_id: str


# Few-shot bank


@dataclass(frozen=True)
class FewShotExample:
    text: str
    label: int
    visit_id: str
    slice_index: int = -1


# Raw-score cut-offs for bank membership: (low if score <= low_max, high if score >= high_min).
DEFAULT_EXTREMES: Dict[SignalType, Tuple[float, float]] = {
    SignalType.TYPE_I: (2.0, 5.0),
    SignalType.TYPE_II: (1.0, 3.0),
}


@dataclass
class FewShotBank:
    """Labeled example slices per signal, each remembering its source visit."""

    examples: Dict[str, List[FewShotExample]] = field(default_factory=dict)

    def add(self, signal_id: str, example: FewShotExample) -> None:
        if example.label not in (0, 1):
            raise PromptError(f"Few-shot label must be 0 or 1, got {example.label}")
        self.examples.setdefault(signal_id, []).append(example)

    def for_task(self, signal_id: str) -> List[FewShotExample]:
        return list(self.examples.get(signal_id, []))

    def __len__(self) -> int:
        return sum(len(v) for v in self.examples.values())

    @classmethod
    def from_corpus(
        cls,
        corpus: Corpus,
        extremes: Optional[Mapping[SignalType, Tuple[float, float]]] = None,
    ) -> "FewShotBank":
        """Collect slices rated at the extreme ends of the scale."""
        extremes = dict(DEFAULT_EXTREMES, **(extremes or {}))
        by_key = corpus.slice_index
        bank = cls()
        for (visit_id, slice_index, signal_id), raw in sorted(corpus.raw_labels.items()):
            slice_ = by_key.get((visit_id, slice_index))
            if slice_ is None:
                continue
            low_max, high_min = extremes[get_task(signal_id).signal_type]
            if raw <= low_max:
                label = 0
            elif raw >= high_min:
                label = 1
            else:
                continue
            bank.add(
                signal_id,
                FewShotExample(render_transcript(slice_), label, visit_id, slice_index),
            )
        LOGGER.info("Few-shot bank holds %d examples over %d signals", len(bank), len(bank.examples))
        return bank

    @classmethod
    def load(cls, path: str) -> "FewShotBank":
        """Read a bank written by :meth:`save`."""
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except FileNotFoundError:
            raise PromptError(f"Few-shot bank '{path}' not found")
        except json.JSONDecodeError as e:
            raise PromptError(f"Few-shot bank '{path}' is not valid JSON: {e.msg}")

        bank = cls()
        for signal_id, entries in data.items():
            get_task(signal_id)
            for entry in entries:
                try:
                    bank.add(
                        signal_id,
                        FewShotExample(
                            text=entry["text"],
                            label=int(entry["label"]),
                            visit_id=str(entry["visit_id"]),
                            slice_index=int(entry.get("slice_index", -1)),
                        ),
                    )
                except KeyError as e:
                    raise PromptError(f"Few-shot entry for '{signal_id}' lacks {e}")
        return bank

    def save(self, path: str) -> None:
        data = {
            signal_id: [
                {
                    "text": ex.text,
                    "label": ex.label,
                    "visit_id": ex.visit_id,
                    "slice_index": ex.slice_index,
                }
                for ex in entries
            ]
            for signal_id, entries in sorted(self.examples.items())
        }
        with open(path, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2, sort_keys=True)
            f.write("\n")


def select_few_shot(
    bank: FewShotBank,
    task: SignalTask,
    target: Slice,
    k_per_class: int = 1,
    seed: int = 0,
) -> List[FewShotExample]:
    """Pick ``k_per_class`` positive and negative examples for a target slice.

    Examples from the target's own visit are never eligible. The draw depends
    only on the seed, the task and the target key. Examples are returned as
    (positive, negative) pairs.

    Raises:
        FewShotUnavailableError: If either class has fewer than k eligible examples
    """
    if k_per_class < 1:
        raise PromptError(f"k_per_class must be at least 1, got {k_per_class}")

    eligible = sorted(
        (ex for ex in bank.for_task(task.signal_id) if ex.visit_id != target.visit_id),
        key=lambda ex: (ex.visit_id, ex.slice_index, ex.text),
    )
    key = f"{task.signal_id}|{target.visit_id}|{target.slice_index}"
    rng = np.random.default_rng([seed, zlib.crc32(key.encode("utf-8"))])

    picked: Dict[int, List[FewShotExample]] = {}
    for label in (1, 0):
        pool = [ex for ex in eligible if ex.label == label]
        if len(pool) < k_per_class:
            kind = "high" if label == 1 else "low"
            raise FewShotUnavailableError(
                f"Only {len(pool)} eligible {kind} examples for '{task.signal_id}' "
                f"outside visit '{target.visit_id}' (need {k_per_class})"
            )
        indices = rng.choice(len(pool), size=k_per_class, replace=False)
        picked[label] = [pool[i] for i in indices]

    ordered: List[FewShotExample] = []
    for positive, negative in zip(picked[1], picked[0]):
        ordered.extend((positive, negative))
    return ordered


# Templates


_SPEAKER_NAMES = {Speaker.PROVIDER: "Doctor", Speaker.PATIENT: "Patient", Speaker.OTHER: "Other"}


def render_transcript(slice_: Slice) -> str:
    """One ``Speaker: text`` line per turn."""
    return "\n".join(f"{_SPEAKER_NAMES[t.speaker]}: {t.text}" for t in slice_.turns)


TEMPLATE_KEYS = (
    "role",
    "job",
    "scoring_type1",
    "scoring_type2_presence",
    "output_answer",
    "output_answer_reasoning",
    "few_shot_intro",
)

_ROLE = (
    "You are a behavior analyst assessing doctor patient interaction to help doctors "
    "with communication feedback. You will be given a small part of a transcript of a "
    "conversation between a doctor and a patient."
)
_JOB = (
    "You have to score the {signal_name} in this text. Look at each behavior and look "
    "for deviations from normal or neutral behavior, be it positive (high) or negative (low)."
)

_YES_NO_TEMPLATES = {
    "role": _ROLE,
    "job": _JOB,
    "scoring_type1": "Is the {signal_name} higher than normal?",
    "scoring_type2_presence": "Did you see any presence of {signal_name} in this slice?",
    "output_answer": 'Respond only with one word, "yes" or "no".',
    "output_answer_reasoning": (
        "{question} Start your answer with either Yes or No. Explain why you think it "
        "was higher or lower. DO NOT repeat any sentence!"
    ),
    "few_shot_intro": "Here are labeled examples. Each transcript is followed by its label.",
}

_NUMERIC_SCALE = (
    "The expected scale tags each behavior with an integer: 0 means below average or "
    "not existent, 1 means above average or existent."
)

_NUMERIC_TEMPLATES = {
    "role": _ROLE,
    "job": _JOB,
    "scoring_type1": _NUMERIC_SCALE,
    "scoring_type2_presence": _NUMERIC_SCALE,
    "output_answer": "Return the integer only.",
    "output_answer_reasoning": (
        "Return the integer first, followed by an explanation of the score in two sentences."
    ),
    "few_shot_intro": (
        "Here are examples (please interpret speaker turns accurately based on the "
        "context, even if the diarization may not be perfect):"
    ),
}


class PromptTemplates:
    """Per-dialect text blocks, with optional overrides from a TOML file."""

    def __init__(self, overrides: Optional[Mapping[str, Mapping[str, str]]] = None):
        self._blocks: Dict[str, Dict[str, str]] = {}
        for name, dialect in DIALECTS.items():
            base = _YES_NO_TEMPLATES if dialect.answer_style == AnswerStyle.YES_NO else _NUMERIC_TEMPLATES
            self._blocks[name] = dict(base)

        for name, blocks in (overrides or {}).items():
            if name not in self._blocks:
                raise PromptError(f"Template override for unknown dialect '{name}'")
            unknown = set(blocks) - set(TEMPLATE_KEYS)
            if unknown:
                raise PromptError(
                    f"Unknown template keys for '{name}': {', '.join(sorted(unknown))}"
                )
            self._blocks[name].update({k: str(v) for k, v in blocks.items()})

    @classmethod
    def from_file(cls, path: str) -> "PromptTemplates":
        try:
            return cls(load_toml(path))
        except (OSError, ValueError) as e:
            raise PromptError(f"Cannot read prompt templates '{path}': {e}")

    def text(self, dialect: ModelDialect, key: str, task: SignalTask, **extra: str) -> str:
        text = self._blocks[dialect.name][key].replace("{signal_name}", task.display_name)
        for name, value in extra.items():
            text = text.replace("{" + name + "}", value)
        return text


DEFAULT_TEMPLATES = PromptTemplates()


def scoring_question(
    task: SignalTask, dialect: ModelDialect, templates: Optional[PromptTemplates] = None
) -> str:
    """The task instruction: above-normal question, presence question or integer scale."""
    templates = templates or DEFAULT_TEMPLATES
    key = "scoring_type1" if task.signal_type == SignalType.TYPE_I else "scoring_type2_presence"
    return templates.text(dialect, key, task)


def _render_examples(
    dialect: ModelDialect, task: SignalTask, examples: Sequence[FewShotExample]
) -> List[str]:
    blocks = []
    for ex in examples:
        if dialect.answer_style == AnswerStyle.YES_NO:
            blocks.append(f"#TRANSCRIPT:\n{ex.text}\n#LABEL: {'yes' if ex.label else 'no'}")
        else:
            level = "High" if ex.label else "Low"
            blocks.append(f"{level} {task.display_name} example:\n{ex.text}")
    return blocks


def compile_prompt(
    config: Configuration,
    task: SignalTask,
    slice_: Slice,
    bank: Optional[FewShotBank] = None,
    k_per_class: int = 1,
    seed: int = 0,
    templates: Optional[PromptTemplates] = None,
) -> CompiledPrompt:
    """Assemble the prompt for one slice, task and configuration.

    Zero-shot and reasoning prompts are role, job, transcript, instruction and
    output format. Few-shot prompts put the instruction and labeled examples
    between the job description and the transcript.

    Raises:
        PromptError: If the configuration is not evaluated or a few-shot bank is missing
        FewShotUnavailableError: If the bank lacks an eligible example for a class
    """
    if config not in valid_configurations():
        raise PromptError(f"Configuration '{config.config_id}' is not supported")

    templates = templates or DEFAULT_TEMPLATES
    dialect, strategy = config.dialect, config.strategy
    question = scoring_question(task, dialect, templates)
    if strategy.uses_reasoning:
        output_format = templates.text(dialect, "output_answer_reasoning", task, question=question)
    else:
        output_format = templates.text(dialect, "output_answer", task)

    transcript = render_transcript(slice_)
    parts = [templates.text(dialect, "role", task), templates.text(dialect, "job", task)]

    if strategy.uses_examples:
        if bank is None:
            raise PromptError(f"Configuration '{config.config_id}' needs a few-shot bank")
        examples = select_few_shot(bank, task, slice_, k_per_class, seed)
        parts.append(f"{question} {templates.text(dialect, 'few_shot_intro', task)}")
        parts.extend(_render_examples(dialect, task, examples))
        if dialect.answer_style == AnswerStyle.YES_NO:
            parts.extend([f"#TRANSCRIPT:\n{transcript}", output_format, "#LABEL:"])
        else:
            parts.extend([f"Transcript:\n{transcript}", output_format])
    else:
        parts.extend([f"Transcript:\n{transcript}", question])
        if not (strategy.uses_reasoning and dialect.answer_style == AnswerStyle.YES_NO):
            parts.append(output_format)
        else:
            # the reasoning format restates the question
            parts[-1] = output_format

    full_text = "\n\n".join(parts)
    if full_text.count(transcript) != 1:
        raise PromptError(
            f"Transcript of {slice_.visit_id}/{slice_.slice_index} does not occur exactly "
            f"once in the '{config.config_id}' prompt for '{task.signal_id}'"
        )

    mode = ParseMode.LEADING_YES_NO if dialect.answer_style == AnswerStyle.YES_NO else ParseMode.LEADING_INTEGER
    return CompiledPrompt(
        full_text=full_text,
        parse_plan=ParsePlan(mode=mode, reasoning_expected=strategy.uses_reasoning),
        candidate_tokens=dialect.candidate_tokens,
        config_id=config.config_id,
        signal_id=task.signal_id,
    )
