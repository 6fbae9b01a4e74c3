"""Tests for corpus module."""

import json
import os

import pytest

from sigeval.corpus import (
    SIGNAL_TASKS,
    Corpus,
    CorpusError,
    CorpusValidationError,
    RawLabel,
    Race,
    Segment,
    SignalType,
    Speaker,
    TranscriptFormatError,
    Turn,
    Visit,
    VisitMetadata,
    binarize,
    corpus_problems,
    filter_slices,
    get_task,
    ingest_transcripts,
    load_labels,
    load_metadata,
    segment_position,
    slice_visit,
    write_slices,
)


def _visit(starts, visit_id="v1", words=5):
    turns = tuple(
        Turn(visit_id, Speaker.PROVIDER if i % 2 == 0 else Speaker.PATIENT, s, s + 1, " ".join(["word"] * words))
        for i, s in enumerate(starts)
    )
    return Visit(visit_id, turns)


class TestSignalTasks:
    """Test cases for the task registry."""

    def test_twenty_tasks(self):
        """Test the registry holds 15 Type-I and 5 Type-II tasks."""
        assert len(SIGNAL_TASKS) == 20
        assert sum(t.signal_type == SignalType.TYPE_I for t in SIGNAL_TASKS) == 15
        assert sum(t.signal_type == SignalType.TYPE_II for t in SIGNAL_TASKS) == 5

    def test_ids_unique(self):
        """Test signal ids are unique."""
        assert len({t.signal_id for t in SIGNAL_TASKS}) == 20

    def test_get_task(self):
        """Test looking up a task and its title."""
        task = get_task("provider_warmth")
        assert task.subject == Speaker.PROVIDER
        assert task.title == "Provider Warmth"

    def test_get_task_unknown(self):
        """Test looking up an unknown task."""
        with pytest.raises(CorpusError):
            get_task("provider_charisma")


class TestBinarize:
    """Test cases for label binarization."""

    @pytest.mark.parametrize("score,expected", [(1, 0), (2, 0), (3, 0), (4, 1), (5, 1), (6, 1)])
    def test_type_one(self, score, expected):
        """Test Type-I scores split at 3.5."""
        assert binarize(get_task("provider_warmth"), score) == expected

    @pytest.mark.parametrize("score,expected", [(1, 0), (2, 1), (3, 1), (4, 1), (5, 1), (6, 1)])
    def test_type_two(self, score, expected):
        """Test Type-II scores split at 1.5."""
        assert binarize(get_task("patient_sadness"), score) == expected

    def test_out_of_range(self):
        """Test scores outside 1-6 are rejected."""
        with pytest.raises(CorpusValidationError):
            binarize(get_task("provider_warmth"), 7)


class TestTurn:
    """Test cases for turn validation."""

    def test_negative_start(self):
        """Test a negative start time is rejected."""
        with pytest.raises(CorpusValidationError, match="negative"):
            Turn("v1", Speaker.PATIENT, -1.0, 2.0, "hello")

    def test_inverted_times(self):
        """Test an end before the start is rejected."""
        with pytest.raises(CorpusValidationError, match="before it starts"):
            Turn("v1", Speaker.PATIENT, 5.0, 2.0, "hello")

    def test_word_count(self):
        """Test whitespace word counting."""
        assert Turn("v1", Speaker.PATIENT, 0.0, 1.0, "one two  three").word_count == 3


class TestIngest:
    """Test cases for transcript ingestion."""

    def test_groups_and_sorts(self, temp_dir: str):
        """Test turns are grouped by visit and sorted by start time."""
        path = os.path.join(temp_dir, "t.jsonl")
        rows = [
            {"visit_id": "b", "speaker": "patient", "start_s": 10, "end_s": 12, "text": "later"},
            {"visit_id": "a", "speaker": "provider", "start_s": 0, "end_s": 2, "text": "hi"},
            {"visit_id": "b", "speaker": "provider", "start_s": 1, "end_s": 3, "text": "first"},
        ]
        with open(path, "w") as f:
            f.write("\n".join(json.dumps(r) for r in rows) + "\n\n")

        visits = ingest_transcripts(path)
        assert [v.visit_id for v in visits] == ["a", "b"]
        assert [t.text for t in visits[1].turns] == ["first", "later"]

    def test_bad_json_line(self, temp_dir: str):
        """Test malformed JSON names the line."""
        path = os.path.join(temp_dir, "t.jsonl")
        with open(path, "w") as f:
            f.write('{"visit_id": "a", "speaker": "provider", "start_s": 0, "end_s": 1, "text": "x"}\n{oops\n')
        with pytest.raises(TranscriptFormatError, match="Line 2"):
            ingest_transcripts(path)

    def test_unknown_speaker(self, temp_dir: str):
        """Test an unknown speaker is rejected."""
        path = os.path.join(temp_dir, "t.jsonl")
        with open(path, "w") as f:
            f.write('{"visit_id": "a", "speaker": "nurse", "start_s": 0, "end_s": 1, "text": "x"}\n')
        with pytest.raises(TranscriptFormatError, match="nurse"):
            ingest_transcripts(path)

    def test_missing_file(self, temp_dir: str):
        """Test a missing file raises CorpusError."""
        with pytest.raises(CorpusError, match="not found"):
            ingest_transcripts(os.path.join(temp_dir, "absent.jsonl"))


class TestSlicing:
    """Test cases for thin slicing."""

    def test_turns_assigned_by_start(self):
        """Test each turn lands in the window of its start time."""
        slices = slice_visit(_visit([0, 100, 179.9, 180, 400]))
        assert [len(s.turns) for s in slices] == [3, 1, 1]

    def test_empty_windows_reindexed(self):
        """Test empty windows are dropped and indices stay dense."""
        slices = slice_visit(_visit([0, 1000]))
        assert [s.slice_index for s in slices] == [0, 1]
        assert [s.segment for s in slices] == [Segment.START, Segment.END]

    def test_turns_preserved(self):
        """Test slicing neither loses nor duplicates turns."""
        visit = _visit([0, 50, 200, 390, 560, 561])
        slices = slice_visit(visit)
        assert sum(len(s.turns) for s in slices) == len(visit.turns)

    def test_segments(self):
        """Test start, middle and end positions."""
        assert segment_position(0, 5) == Segment.START
        assert segment_position(2, 5) == Segment.MIDDLE
        assert segment_position(4, 5) == Segment.END
        assert segment_position(0, 1) == Segment.START

    def test_segment_out_of_range(self):
        """Test a slice index outside the visit."""
        with pytest.raises(CorpusError):
            segment_position(5, 5)

    def test_bad_slice_length(self):
        """Test a non-positive slice length is rejected."""
        with pytest.raises(CorpusError):
            slice_visit(_visit([0]), 0)

    def test_filter_min_words(self):
        """Test slices below the word minimum are dropped."""
        slices = slice_visit(_visit([0, 200, 201, 202, 203], words=5))
        kept = filter_slices(slices, 20)
        assert [s.slice_index for s in kept] == [1]
        assert kept[0].segment == Segment.START

    def test_filter_reassigns_segments(self):
        """Test dropping the first and last slices moves start and end inward."""
        visit = Visit(
            "v1",
            tuple(
                Turn("v1", Speaker.PROVIDER, start, start + 1, " ".join(["word"] * words))
                for start, words in ((0, 3), (200, 25), (400, 25), (600, 25), (800, 3))
            ),
        )
        kept = filter_slices(slice_visit(visit), 20)
        assert [(s.slice_index, s.segment) for s in kept] == [
            (1, Segment.START),
            (2, Segment.MIDDLE),
            (3, Segment.END),
        ]

    def test_slice_text(self):
        """Test slice text joins the turn texts by newline."""
        slice_ = slice_visit(_visit([0, 10], words=2))[0]
        assert slice_.text == "word word\nword word"
        assert slice_.word_count == 4


class TestLabelsAndMetadata:
    """Test cases for label and metadata files."""

    def test_load_labels(self, fixture_files):
        """Test every fixture label is read."""
        labels = load_labels(fixture_files["labels"])
        assert len(labels) == 10 * 7 * 20

    def test_label_out_of_range(self, temp_dir: str):
        """Test an invalid score names its line."""
        path = os.path.join(temp_dir, "labels.csv")
        with open(path, "w") as f:
            f.write("visit_id,slice_index,signal_id,raw_score\nv1,0,provider_warmth,3\nv1,1,provider_warmth,9\n")
        with pytest.raises(CorpusValidationError, match="line 3"):
            load_labels(path)

    def test_label_missing_column(self, temp_dir: str):
        """Test a labels file without the score column."""
        path = os.path.join(temp_dir, "labels.csv")
        with open(path, "w") as f:
            f.write("visit_id,slice_index,signal_id\nv1,0,provider_warmth\n")
        with pytest.raises(CorpusError, match="raw_score"):
            load_labels(path)

    def test_load_metadata(self, fixture_files):
        """Test race and provider groups are read."""
        metadata = load_metadata(fixture_files["metadata"])
        assert metadata["v01"].patient_race == Race.WHITE
        assert metadata["v02"].patient_race == Race.NON_WHITE
        assert metadata["v02"].provider_group == "g1"

    def test_unknown_race(self, temp_dir: str):
        """Test an unknown race value is rejected."""
        path = os.path.join(temp_dir, "meta.csv")
        with open(path, "w") as f:
            f.write("visit_id,provider_id,provider_group,patient_race\nv1,p1,g1,martian\n")
        with pytest.raises(CorpusError, match="martian"):
            load_metadata(path)


class TestCorpus:
    """Test cases for the assembled corpus."""

    def test_fixture_shape(self, fixture_corpus: Corpus):
        """Test the fixture yields 70 slices after filtering."""
        assert len(fixture_corpus.slices) == 70
        assert len(fixture_corpus.visits) == 10

    def test_short_tail_slice_dropped(self, fixture_corpus: Corpus):
        """Test the short final slice of the last visit is filtered out."""
        assert ("v10", 7) not in fixture_corpus.slice_index

    def test_one_start_and_end_per_visit(self, fixture_corpus: Corpus):
        """Test every visit has one start and one end slice after filtering."""
        by_visit = {}
        for slice_ in sorted(fixture_corpus.slices, key=lambda s: s.key):
            by_visit.setdefault(slice_.visit_id, []).append(slice_.segment)
        for visit_id, segments in by_visit.items():
            assert segments.count(Segment.START) == 1, visit_id
            assert segments.count(Segment.END) == 1, visit_id
            assert segments[0] == Segment.START and segments[-1] == Segment.END, visit_id
        assert fixture_corpus.slice_index[("v10", 6)].segment == Segment.END

    def test_label_lookup(self, fixture_corpus: Corpus):
        """Test labels are binarized on lookup."""
        assert fixture_corpus.label("v01", 0, "provider_warmth") in (0, 1)
        assert fixture_corpus.label("v01", 99, "provider_warmth") is None

    def test_labeled_slices(self, fixture_corpus: Corpus):
        """Test every slice is labeled for every task."""
        assert len(fixture_corpus.labeled_slices(get_task("patient_distress"))) == 70

    def test_duplicate_label(self):
        """Test a duplicated label key is rejected."""
        labels = [RawLabel("v1", 0, "provider_warmth", 3), RawLabel("v1", 0, "provider_warmth", 4)]
        with pytest.raises(CorpusValidationError, match="Duplicate"):
            Corpus.build([_visit([0, 1, 2, 3], words=6)], labels)

    def test_summary(self, fixture_corpus: Corpus):
        """Test dataset statistics."""
        summary = fixture_corpus.summary()
        assert summary["slices_per_visit"] == (7.0, 0.0)
        assert summary["words_per_slice"] == (36.0, 0.0)
        assert set(summary) == {
            "slices_per_visit", "words_per_slice", "words_start", "words_middle", "words_end"
        }


class TestCorpusProblems:
    """Test cases for cross-file consistency checks."""

    def test_clean(self, fixture_files):
        """Test the fixture files are consistent."""
        problems = corpus_problems(
            ingest_transcripts(fixture_files["transcripts"]),
            load_labels(fixture_files["labels"]),
            load_metadata(fixture_files["metadata"]),
        )
        assert problems == []

    def test_unknown_visit(self):
        """Test a label naming an unknown visit."""
        problems = corpus_problems([_visit([0])], [RawLabel("ghost", 0, "provider_warmth", 3)], None)
        assert problems == ["label (ghost, 0, provider_warmth): unknown visit 'ghost'"]

    def test_unknown_slice(self):
        """Test a label naming a slice the visit does not have."""
        problems = corpus_problems([_visit([0])], [RawLabel("v1", 3, "provider_warmth", 3)], None)
        assert "visit has 1 slices" in problems[0]

    def test_metadata_gaps(self):
        """Test missing metadata rows and provider groups."""
        visits = [_visit([0], "v1"), _visit([0], "v2")]
        metadata = {"v1": VisitMetadata("v1", "p1", "", Race.WHITE)}
        problems = corpus_problems(visits, [], metadata)
        assert "metadata: visit 'v1' has no provider_group" in problems
        assert "metadata: visit 'v2' has no row" in problems
        assert corpus_problems(visits, [], metadata, require_groups=False) == [
            "metadata: visit 'v2' has no row"
        ]

    def test_write_slices(self, fixture_corpus: Corpus, temp_dir: str):
        """Test slices are exported in key order."""
        path = os.path.join(temp_dir, "slices.jsonl")
        assert write_slices(reversed(fixture_corpus.slices), path) == 70
        with open(path) as f:
            first = json.loads(f.readline())
        assert (first["visit_id"], first["slice_index"], first["segment"]) == ("v01", 0, "start")
