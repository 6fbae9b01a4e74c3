"""Pytest configuration and shared fixtures."""

import json
import os
import shutil
import tempfile
from typing import Dict, Generator

import numpy as np
import pytest

from sigeval.config import RunConfig, load_config
from sigeval.corpus import SIGNAL_TASKS, Corpus, ingest_transcripts, load_labels, load_metadata

N_VISITS = 10
SLICES_PER_VISIT = 7
TURNS_PER_SLICE = 6
SLICE_LEN_S = 180.0

VOCABULARY = (
    "the doctor said we should check your blood pressure again today and I think "
    "that is good thank you so much I have been worried about the pain in my back "
    "since last week maybe we can try a new medicine okay sounds great please tell "
    "me more about how you sleep at night"
).split()

YES_NO_RULES = {
    "rules": [
        {"pattern": "provider warmth", "response_text": "Yes, the doctor sounds warm."},
        {"pattern": "patient sadness", "response_text": "Unclear.", "logprobs": {"yes": -0.3, "no": -1.4}},
        {"pattern": "patient distress", "response_text": "I cannot say."},
    ],
    "default": {"response_text": "No"},
}

NUMERIC_RULES = {
    "rules": [
        {"pattern": "provider warmth", "response_text": "1"},
        {"pattern": "patient sadness", "response_text": "Score: none", "logprobs": {"1": -0.2, "0": -2.0}},
    ],
    "default": {"response_text": "0"},
}

LEXICON_ROWS = [
    ("posemo", "good"),
    ("posemo", "great"),
    ("posemo", "thank*"),
    ("negemo", "worried"),
    ("negemo", "pain"),
    ("cogproc", "think*"),
    ("cogproc", "maybe"),
]


def write_fixture_corpus(directory: str, seed: int = 20240101) -> Dict[str, str]:
    """Write a synthetic 10-visit corpus with full labels; returns the file paths.

    Every visit has seven 180-second slices of six turns each, plus a final
    short turn in the last visit that forms a slice below the word minimum.
    """
    rng = np.random.default_rng(seed)
    paths = {
        "transcripts": os.path.join(directory, "transcripts.jsonl"),
        "labels": os.path.join(directory, "labels.csv"),
        "metadata": os.path.join(directory, "metadata.csv"),
        "lexicon": os.path.join(directory, "lexicon.csv"),
        "rules_yes_no": os.path.join(directory, "rules_yes_no.json"),
        "rules_numeric": os.path.join(directory, "rules_numeric.json"),
    }
    visit_ids = [f"v{i:02d}" for i in range(1, N_VISITS + 1)]
    step = SLICE_LEN_S / TURNS_PER_SLICE

    with open(paths["transcripts"], "w", encoding="utf-8") as f:
        for visit_id in visit_ids:
            for turn in range(SLICES_PER_VISIT * TURNS_PER_SLICE):
                words = list(rng.choice(VOCABULARY, size=6))
                record = {
                    "visit_id": visit_id,
                    "speaker": "provider" if turn % 2 == 0 else "patient",
                    "start_s": turn * step,
                    "end_s": turn * step + step - 5,
                    "text": " ".join(words).capitalize() + ".",
                }
                f.write(json.dumps(record) + "\n")
        tail = {
            "visit_id": visit_ids[-1],
            "speaker": "patient",
            "start_s": SLICES_PER_VISIT * SLICE_LEN_S + 1,
            "end_s": SLICES_PER_VISIT * SLICE_LEN_S + 4,
            "text": "Okay, thank you.",
        }
        f.write(json.dumps(tail) + "\n")

    with open(paths["labels"], "w", encoding="utf-8") as f:
        f.write("visit_id,slice_index,signal_id,raw_score\n")
        for visit_id in visit_ids:
            for slice_index in range(SLICES_PER_VISIT):
                for task in SIGNAL_TASKS:
                    f.write(f"{visit_id},{slice_index},{task.signal_id},{int(rng.integers(1, 7))}\n")

    with open(paths["metadata"], "w", encoding="utf-8") as f:
        f.write("visit_id,provider_id,provider_group,patient_race\n")
        for i, visit_id in enumerate(visit_ids):
            race = "white" if i % 2 == 0 else "non_white"
            f.write(f"{visit_id},p{i // 2},g{i // 2 + 1},{race}\n")

    with open(paths["lexicon"], "w", encoding="utf-8") as f:
        f.write("category,pattern\n")
        for category, pattern in LEXICON_ROWS:
            f.write(f"{category},{pattern}\n")

    for name, rules in (("rules_yes_no", YES_NO_RULES), ("rules_numeric", NUMERIC_RULES)):
        with open(paths[name], "w", encoding="utf-8") as f:
            json.dump(rules, f, indent=2)
    return paths


def write_config(directory: str, seed: int = 7, extra: str = "") -> str:
    """Write a TOML run configuration using mock backends for every dialect."""
    path = os.path.join(directory, "sigeval.toml")
    with open(path, "w", encoding="utf-8") as f:
        f.write(
            f"""seed = {seed}

[paths]
transcripts = "transcripts.jsonl"
labels = "labels.csv"
metadata = "metadata.csv"
lexicon = "lexicon.csv"
run_dir = "run"

[backends.flan]
kind = "mock"
rules = "rules_yes_no.json"

[backends.gemma]
kind = "mock"
rules = "rules_yes_no.json"

[backends.llama]
kind = "mock"
rules = "rules_numeric.json"
{extra}"""
        )
    return path


@pytest.fixture
def temp_dir() -> Generator[str, None, None]:
    """Create a temporary directory for testing."""
    temp_dir = tempfile.mkdtemp()
    original_cwd = os.getcwd()

    try:
        os.chdir(temp_dir)
        yield temp_dir
    finally:
        os.chdir(original_cwd)
        shutil.rmtree(temp_dir, ignore_errors=True)


@pytest.fixture
def fixture_files(temp_dir: str) -> Dict[str, str]:
    """Synthetic corpus files in the temporary directory."""
    return write_fixture_corpus(temp_dir)


@pytest.fixture
def config_path(temp_dir: str, fixture_files: Dict[str, str]) -> str:
    """TOML config pointing at the fixture corpus and mock rules."""
    return write_config(temp_dir)


@pytest.fixture
def run_config(config_path: str) -> RunConfig:
    return load_config(config_path)


@pytest.fixture
def fixture_corpus(fixture_files: Dict[str, str]) -> Corpus:
    """The fixture corpus, sliced, filtered and labeled."""
    return Corpus.build(
        ingest_transcripts(fixture_files["transcripts"]),
        load_labels(fixture_files["labels"]),
        load_metadata(fixture_files["metadata"]),
    )
