"""Transcript ingestion, thin slicing and label handling."""

import json
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

LOGGER = logging.getLogger(__name__)

DEFAULT_SLICE_LEN_S = 180.0
DEFAULT_MIN_WORDS = 20


class CorpusError(Exception):
    """Exception raised for corpus ingestion and validation errors."""

    pass


class TranscriptFormatError(CorpusError):
    """Raised when a transcript line cannot be parsed."""

    pass


class CorpusValidationError(CorpusError):
    """Raised when a record violates a corpus invariant."""

    pass


class Speaker(str, Enum):
    PROVIDER = "provider"
    PATIENT = "patient"
    OTHER = "other"


class Segment(str, Enum):
    START = "start"
    MIDDLE = "middle"
    END = "end"


class SignalType(str, Enum):
    TYPE_I = "TypeI"
    TYPE_II = "TypeII"


class Race(str, Enum):
    WHITE = "white"
    NON_WHITE = "non_white"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class Turn:
    """One diarized utterance."""

    visit_id: str
    speaker: Speaker
    start_s: float
    end_s: float
    text: str

    def __post_init__(self) -> None:
        if self.start_s < 0:
            raise CorpusValidationError(
                f"Turn in visit '{self.visit_id}' starts at negative time {self.start_s}"
            )
        if self.end_s < self.start_s:
            raise CorpusValidationError(
                f"Turn in visit '{self.visit_id}' ends ({self.end_s}) before it starts ({self.start_s})"
            )
        if not self.text.strip():
            raise CorpusValidationError(f"Turn in visit '{self.visit_id}' has empty text")

    @property
    def word_count(self) -> int:
        return len(self.text.split())


@dataclass(frozen=True)
class Visit:
    """A diarized conversation with its turns ordered by start time."""

    visit_id: str
    turns: Tuple[Turn, ...]

    @property
    def word_count(self) -> int:
        return sum(turn.word_count for turn in self.turns)


@dataclass(frozen=True)
class Slice:
    """A thin slice of a visit: the unit of annotation and prediction."""

    visit_id: str
    slice_index: int
    turns: Tuple[Turn, ...]
    segment: Segment

    @property
    def key(self) -> Tuple[str, int]:
        return (self.visit_id, self.slice_index)

    @property
    def text(self) -> str:
        """Concatenated utterance text, one turn per line."""
        return "\n".join(turn.text for turn in self.turns)

    @property
    def word_count(self) -> int:
        return len(" ".join(turn.text for turn in self.turns).split())


@dataclass(frozen=True)
class SignalTask:
    """One binary social-signal prediction task."""

    signal_id: str
    subject: Speaker
    display_name: str
    signal_type: SignalType

    @property
    def title(self) -> str:
        """Row label used in report tables, e.g. ``Provider Warmth``."""
        return self.display_name.title()


def _task(subject: Speaker, behaviour: str, signal_type: SignalType) -> SignalTask:
    return SignalTask(
        signal_id=f"{subject.value}_{behaviour}",
        subject=subject,
        display_name=f"{subject.value} {behaviour}",
        signal_type=signal_type,
    )


_TYPE_I_BEHAVIOURS = (
    "dominance",
    "attentiveness",
    "warmth",
    "engagement",
    "empathy",
    "respect",
    "interactivity",
)

# Registry order is the row order of the overall results table.
SIGNAL_TASKS: Tuple[SignalTask, ...] = (
    tuple(_task(Speaker.PROVIDER, b, SignalType.TYPE_I) for b in _TYPE_I_BEHAVIOURS)
    + tuple(_task(Speaker.PATIENT, b, SignalType.TYPE_I) for b in _TYPE_I_BEHAVIOURS)
    + (
        _task(Speaker.PROVIDER, "hurriedness", SignalType.TYPE_I),
        _task(Speaker.PROVIDER, "irritation", SignalType.TYPE_II),
        _task(Speaker.PATIENT, "irritation", SignalType.TYPE_II),
        _task(Speaker.PATIENT, "nervousness", SignalType.TYPE_II),
        _task(Speaker.PATIENT, "sadness", SignalType.TYPE_II),
        _task(Speaker.PATIENT, "distress", SignalType.TYPE_II),
    )
)

_TASKS_BY_ID: Dict[str, SignalTask] = {task.signal_id: task for task in SIGNAL_TASKS}


def get_task(signal_id: str) -> SignalTask:
    """Look up a task in the registry.

    Raises:
        CorpusError: If the signal id is not one of the 20 registered tasks
    """
    try:
        return _TASKS_BY_ID[signal_id]
    except KeyError:
        raise CorpusError(f"Unknown signal '{signal_id}'")


@dataclass(frozen=True)
class RawLabel:
    """A coder's 1-6 rating of one signal in one slice."""

    visit_id: str
    slice_index: int
    signal_id: str
    raw_score: float

    def __post_init__(self) -> None:
        if not 1 <= self.raw_score <= 6:
            raise CorpusValidationError(
                f"Score {self.raw_score} for {self.signal_id} in "
                f"{self.visit_id}/{self.slice_index} is outside [1, 6]"
            )


@dataclass(frozen=True)
class VisitMetadata:
    """Provider and patient attributes of a visit."""

    visit_id: str
    provider_id: str
    provider_group: str
    patient_race: Race


def _parse_turn(line: str, line_no: int) -> Turn:
    try:
        record = json.loads(line)
    except json.JSONDecodeError as e:
        raise TranscriptFormatError(f"Line {line_no}: invalid JSON ({e.msg})")
    if not isinstance(record, dict):
        raise TranscriptFormatError(f"Line {line_no}: expected a JSON object")

    missing = [k for k in ("visit_id", "speaker", "start_s", "end_s", "text") if k not in record]
    if missing:
        raise TranscriptFormatError(f"Line {line_no}: missing keys {', '.join(missing)}")

    try:
        speaker = Speaker(record["speaker"])
    except ValueError:
        raise TranscriptFormatError(
            f"Line {line_no}: unknown speaker '{record['speaker']}'"
        )
    try:
        start_s = float(record["start_s"])
        end_s = float(record["end_s"])
    except (TypeError, ValueError):
        raise TranscriptFormatError(f"Line {line_no}: timestamps must be numbers")
    if not isinstance(record["text"], str):
        raise TranscriptFormatError(f"Line {line_no}: text must be a string")

    try:
        return Turn(
            visit_id=str(record["visit_id"]),
            speaker=speaker,
            start_s=start_s,
            end_s=end_s,
            text=record["text"],
        )
    except CorpusValidationError as e:
        raise CorpusValidationError(f"Line {line_no}: {e}")


def ingest_transcripts(path: str) -> List[Visit]:
    """Read a JSON Lines transcript file into visits.

    Blank lines are ignored. Turns are grouped by visit and stably sorted by
    start time; visits are returned in visit id order.

    Args:
        path: Path to the transcript file

    Returns:
        List of Visit objects

    Raises:
        TranscriptFormatError: If a line does not parse as a turn record
        CorpusValidationError: If a turn has negative or inverted timestamps
    """
    grouped: Dict[str, List[Turn]] = {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            for line_no, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                turn = _parse_turn(line, line_no)
                grouped.setdefault(turn.visit_id, []).append(turn)
    except FileNotFoundError:
        raise CorpusError(f"Transcript file '{path}' not found")

    return [
        Visit(visit_id, tuple(sorted(turns, key=lambda t: t.start_s)))
        for visit_id, turns in sorted(grouped.items())
    ]


def segment_position(slice_index: int, n_slices: int) -> Segment:
    """Position of a slice within its visit.

    A single-slice visit is a start slice only.
    """
    if n_slices < 1 or not 0 <= slice_index < n_slices:
        raise CorpusError(f"Slice index {slice_index} out of range for {n_slices} slices")
    if slice_index == 0:
        return Segment.START
    if slice_index == n_slices - 1:
        return Segment.END
    return Segment.MIDDLE


def slice_visit(visit: Visit, slice_len_s: float = DEFAULT_SLICE_LEN_S) -> List[Slice]:
    """Cut a visit into thin slices of ``slice_len_s`` seconds.

    Each turn goes to the window ``floor(start_s / slice_len_s)`` and is never
    split. Empty windows are dropped and the remaining slices re-indexed
    densely in time order.
    """
    if slice_len_s <= 0:
        raise CorpusError(f"Slice length must be positive, got {slice_len_s}")

    windows: Dict[int, List[Turn]] = {}
    for turn in visit.turns:
        windows.setdefault(math.floor(turn.start_s / slice_len_s), []).append(turn)

    ordered = [windows[w] for w in sorted(windows)]
    n_slices = len(ordered)
    return [
        Slice(
            visit_id=visit.visit_id,
            slice_index=index,
            turns=tuple(turns),
            segment=segment_position(index, n_slices),
        )
        for index, turns in enumerate(ordered)
    ]


def filter_slices(slices: Iterable[Slice], min_words: int = DEFAULT_MIN_WORDS) -> List[Slice]:
    """Drop slices with fewer than ``min_words`` whitespace tokens and re-assign segments per visit."""
    if min_words < 0:
        raise CorpusError(f"min_words must be non-negative, got {min_words}")

    slices = list(slices)
    kept = [s for s in slices if s.word_count >= min_words]
    dropped = len(slices) - len(kept)
    if dropped:
        LOGGER.info("Dropped %d of %d slices below %d words", dropped, len(slices), min_words)

    # Segments follow the kept slices; slice_index stays as cut so labels line up.
    per_visit: Dict[str, List[int]] = {}
    for position, slice_ in enumerate(kept):
        per_visit.setdefault(slice_.visit_id, []).append(position)
    for positions in per_visit.values():
        ordered = sorted(positions, key=lambda p: kept[p].slice_index)
        for rank, position in enumerate(ordered):
            kept[position] = replace(kept[position], segment=segment_position(rank, len(ordered)))
    return kept


def binarize(task: SignalTask, raw_score: float) -> int:
    """Binary label for a raw 1-6 rating.

    Type-I signals split at the neutral midpoint 3.5; Type-II signals at 1.5
    (a score of 1 means the signal is absent).
    """
    if not 1 <= raw_score <= 6:
        raise CorpusValidationError(f"Score {raw_score} for {task.signal_id} is outside [1, 6]")
    threshold = 3.5 if task.signal_type == SignalType.TYPE_I else 1.5
    return int(raw_score > threshold)


def _read_csv(path: str, columns: Sequence[str], what: str) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except FileNotFoundError:
        raise CorpusError(f"{what} file '{path}' not found")
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise CorpusError(f"Cannot parse {what.lower()} file '{path}': {e}")

    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise CorpusError(f"{what} file '{path}' is missing columns: {', '.join(missing)}")
    return frame


def load_labels(path: str) -> List[RawLabel]:
    """Read the labels CSV (visit_id,slice_index,signal_id,raw_score).

    Raises:
        CorpusError: If the file is missing, malformed, or references an unknown signal
    """
    frame = _read_csv(path, ("visit_id", "slice_index", "signal_id", "raw_score"), "Labels")
    labels = []
    for row_no, row in enumerate(frame.itertuples(index=False), start=2):
        get_task(row.signal_id)
        try:
            slice_index = int(row.slice_index)
            raw_score = float(row.raw_score)
        except ValueError:
            raise CorpusError(f"{path}, line {row_no}: slice_index and raw_score must be numeric")
        try:
            labels.append(RawLabel(row.visit_id, slice_index, row.signal_id, raw_score))
        except CorpusValidationError as e:
            raise CorpusValidationError(f"{path}, line {row_no}: {e}")
    return labels


def load_metadata(path: str) -> Dict[str, VisitMetadata]:
    """Read the metadata CSV (visit_id,provider_id,provider_group,patient_race)."""
    frame = _read_csv(
        path, ("visit_id", "provider_id", "provider_group", "patient_race"), "Metadata"
    )
    metadata = {}
    for row_no, row in enumerate(frame.itertuples(index=False), start=2):
        race_value = row.patient_race.strip().lower().replace("-", "_") or Race.UNKNOWN.value
        try:
            race = Race(race_value)
        except ValueError:
            raise CorpusError(f"{path}, line {row_no}: unknown patient_race '{row.patient_race}'")
        if row.visit_id in metadata:
            raise CorpusError(f"{path}, line {row_no}: duplicate visit '{row.visit_id}'")
        metadata[row.visit_id] = VisitMetadata(
            visit_id=row.visit_id,
            provider_id=row.provider_id,
            provider_group=row.provider_group.strip(),
            patient_race=race,
        )
    return metadata


LabelKey = Tuple[str, int, str]


@dataclass
class Corpus:
    """Filtered slices with their binarized labels and visit metadata."""

    slices: List[Slice]
    raw_labels: Dict[LabelKey, float] = field(default_factory=dict)
    metadata: Dict[str, VisitMetadata] = field(default_factory=dict)
    visits: List[Visit] = field(default_factory=list)

    @classmethod
    def build(
        cls,
        visits: Sequence[Visit],
        labels: Iterable[RawLabel] = (),
        metadata: Optional[Mapping[str, VisitMetadata]] = None,
        slice_len_s: float = DEFAULT_SLICE_LEN_S,
        min_words: int = DEFAULT_MIN_WORDS,
    ) -> "Corpus":
        """Slice and filter visits, then attach labels and metadata."""
        slices: List[Slice] = []
        for visit in visits:
            slices.extend(slice_visit(visit, slice_len_s))
        slices = filter_slices(slices, min_words)

        raw_labels: Dict[LabelKey, float] = {}
        for label in labels:
            key = (label.visit_id, label.slice_index, label.signal_id)
            if key in raw_labels:
                raise CorpusValidationError(f"Duplicate label for {key}")
            raw_labels[key] = label.raw_score

        return cls(
            slices=slices,
            raw_labels=raw_labels,
            metadata=dict(metadata or {}),
            visits=list(visits),
        )

    @property
    def slice_index(self) -> Dict[Tuple[str, int], Slice]:
        return {s.key: s for s in self.slices}

    def label(self, visit_id: str, slice_index: int, signal_id: str) -> Optional[int]:
        """Binarized label, or None when the slice was not coded for the signal."""
        raw = self.raw_labels.get((visit_id, slice_index, signal_id))
        if raw is None:
            return None
        return binarize(get_task(signal_id), raw)

    def labeled_slices(self, task: SignalTask) -> List[Slice]:
        return [
            s for s in self.slices
            if (s.visit_id, s.slice_index, task.signal_id) in self.raw_labels
        ]

    def summary(self) -> Dict[str, Tuple[float, float]]:
        """Dataset statistics as (mean, population sd) pairs.

        Keys: slices_per_visit, words_per_slice and words_<segment> for the
        start, middle and end segments.
        """
        def mean_sd(values: Sequence[float]) -> Tuple[float, float]:
            if not values:
                return (float("nan"), float("nan"))
            array = np.asarray(values, dtype=float)
            return (float(array.mean()), float(array.std()))

        per_visit: Dict[str, int] = {}
        for s in self.slices:
            per_visit[s.visit_id] = per_visit.get(s.visit_id, 0) + 1

        stats = {
            "slices_per_visit": mean_sd(list(per_visit.values())),
            "words_per_slice": mean_sd([s.word_count for s in self.slices]),
        }
        for segment in Segment:
            stats[f"words_{segment.value}"] = mean_sd(
                [s.word_count for s in self.slices if s.segment == segment]
            )
        return stats


def corpus_problems(
    visits: Sequence[Visit],
    labels: Sequence[RawLabel],
    metadata: Optional[Mapping[str, VisitMetadata]],
    slice_len_s: float = DEFAULT_SLICE_LEN_S,
    require_groups: bool = True,
) -> List[str]:
    """Consistency problems between transcripts, labels and metadata.

    Labels must name an existing visit and one of its slices; metadata, when
    given, must cover every visit and (with ``require_groups``) assign each a
    provider group.
    """
    problems = []
    slice_counts = {v.visit_id: len(slice_visit(v, slice_len_s)) for v in visits}
    for label in labels:
        key = f"({label.visit_id}, {label.slice_index}, {label.signal_id})"
        n_slices = slice_counts.get(label.visit_id)
        if n_slices is None:
            problems.append(f"label {key}: unknown visit '{label.visit_id}'")
        elif not 0 <= label.slice_index < n_slices:
            problems.append(f"label {key}: visit has {n_slices} slices")

    if metadata is not None:
        for visit_id in sorted(slice_counts):
            meta = metadata.get(visit_id)
            if meta is None:
                problems.append(f"metadata: visit '{visit_id}' has no row")
            elif require_groups and not meta.provider_group:
                problems.append(f"metadata: visit '{visit_id}' has no provider_group")
        for visit_id in sorted(set(metadata) - set(slice_counts)):
            LOGGER.info("Metadata row for visit '%s' has no transcript", visit_id)
    return problems


def write_slices(slices: Iterable[Slice], path: str) -> int:
    """Write slices as JSON Lines in (visit_id, slice_index) order; returns the count."""
    ordered = sorted(slices, key=lambda s: s.key)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for s in ordered:
            record = {
                "visit_id": s.visit_id,
                "slice_index": s.slice_index,
                "segment": s.segment.value,
                "start_s": s.turns[0].start_s,
                "end_s": max(t.end_s for t in s.turns),
                "word_count": s.word_count,
                "text": s.text,
            }
            f.write(json.dumps(record, sort_keys=True) + "\n")
    return len(ordered)
