"""Tests for analysis module."""

import json
import os

import numpy as np
import pandas as pd
import pytest

from sigeval.analysis import (
    ANALYSES,
    AnalysisContext,
    analyze_difficulty,
    analyze_fairness,
    analyze_glmm,
    analyze_overall,
    build_cell_table,
    run_analyses,
)
from sigeval.config import AnalysisConfig
from sigeval.corpus import SIGNAL_TASKS
from sigeval.difficulty import load_lexicon
from sigeval.inference import ABSTAIN, DIRECT, PREDICTIONS_NAME, MockBackend, PredictionRecord, run_experiment
from sigeval.prompts import FewShotBank, get_configuration, valid_configurations
from sigeval.reports import ReportWriter, journal_hash

CONFIG_IDS = ("FLAN-ZS", "Gemma-ZS", "LLaMA-ZS", "LLaMA-FS")


@pytest.fixture
def records(fixture_corpus, fixture_files, temp_dir):
    backends = {
        "flan": MockBackend.from_file(fixture_files["rules_yes_no"]),
        "gemma": MockBackend.from_file(fixture_files["rules_yes_no"]),
        "llama": MockBackend.from_file(fixture_files["rules_numeric"]),
    }
    result = run_experiment(
        fixture_corpus,
        [get_configuration(c) for c in CONFIG_IDS],
        SIGNAL_TASKS,
        backends,
        os.path.join(temp_dir, "run"),
        FewShotBank.from_corpus(fixture_corpus),
        seed=7,
    )
    return result.records


def _context(cells, corpus, out_dir, journal_sha="0" * 64, **options):
    return AnalysisContext(
        cells=cells,
        corpus=corpus,
        writer=ReportWriter(out_dir, journal_sha),
        options=AnalysisConfig(**options),
    )


class TestBuildCellTable:
    """Test cases for joining predictions with labels and metadata."""

    def test_one_row_per_record(self, records, fixture_corpus):
        """Test every prediction with a label becomes a row."""
        cells = build_cell_table(records, fixture_corpus)
        assert len(cells) == len(records) == 70 * 20 * len(CONFIG_IDS)
        assert set(cells["model"]) == {"FLAN", "Gemma", "LLaMA"}
        assert set(cells["prompt"]) == {"ZS", "FS"}
        assert set(cells["segment"]) == {"start", "middle", "end"}

    def test_abstention_is_nan(self, records, fixture_corpus):
        """Test abstentions carry no prediction."""
        cells = build_cell_table(records, fixture_corpus)
        abstained = cells[cells["parse_status"] == ABSTAIN]
        assert len(abstained) == 70 * 2
        assert abstained["prediction"].isna().all()

    def test_unmatched_records_dropped(self, fixture_corpus):
        """Test records without a slice, label or known configuration are ignored."""
        records = [
            PredictionRecord("v01", 0, "provider_warmth", "FLAN-ZS", 1, DIRECT),
            PredictionRecord("v10", 7, "provider_warmth", "FLAN-ZS", 1, DIRECT),
            PredictionRecord("v99", 0, "provider_warmth", "FLAN-ZS", 1, DIRECT),
            PredictionRecord("v01", 0, "provider_warmth", "FLAN-COT", 1, DIRECT),
        ]
        cells = build_cell_table(records, fixture_corpus)
        assert len(cells) == 1
        assert cells.loc[0, "race"] == "white"
        assert cells.loc[0, "provider_group"] == "g1"


class TestAnalyses:
    """Test cases for the individual report analyses."""

    def test_overall(self, records, fixture_corpus, temp_dir):
        """Test the balanced-accuracy table and its companions."""
        out = os.path.join(temp_dir, "report")
        ctx = _context(build_cell_table(records, fixture_corpus), fixture_corpus, out)
        outcome = analyze_overall(ctx)
        assert outcome.ok
        assert outcome.summary["configs"] == list(CONFIG_IDS)
        for name in ("overall_ba.csv", "overall_ba.md", "dataset_stats.csv", "label_prevalence.csv", "abstentions.csv"):
            assert os.path.exists(os.path.join(out, name))
        with open(os.path.join(out, "overall_ba.md")) as f:
            text = f.read()
        assert "**Type-I**" in text
        assert "**Type-II**" in text
        assert "| Provider Warmth |" in text
        assert "Ensemble (LOGO)" not in text

    def test_overall_layout(self, records, fixture_corpus, temp_dir):
        """Test the table has one column per configuration and summary rows per section."""
        out = os.path.join(temp_dir, "report")
        analyze_overall(_context(build_cell_table(records, fixture_corpus), fixture_corpus, out))
        with open(os.path.join(out, "overall_ba.md")) as f:
            lines = f.read().splitlines()
        assert "| Task | FLAN-ZS | Gemma-ZS | LLaMA-ZS | LLaMA-FS |" in lines
        rows = [line for line in lines if line.startswith("| ") and not line.startswith("| Task")]
        assert len(rows) == 2 + 20 + 4
        assert sum(line.startswith("| MEAN |") for line in rows) == 2
        assert sum(line.startswith("| STD |") for line in rows) == 2

    def test_abstention_counts(self, records, fixture_corpus, temp_dir):
        """Test abstentions and logit fallbacks are counted per configuration."""
        out = os.path.join(temp_dir, "report")
        analyze_overall(_context(build_cell_table(records, fixture_corpus), fixture_corpus, out))
        table = pd.read_csv(os.path.join(out, "abstentions.csv"), comment="#").set_index("config_id")
        assert table.loc["FLAN-ZS", "abstained"] == 70
        assert table.loc["FLAN-ZS", "logit_fallback"] == 70
        assert table.loc["LLaMA-ZS", "abstained"] == 0
        assert table.loc["FLAN-ZS", "n"] == 1400

    def test_difficulty_histogram(self, records, fixture_corpus, temp_dir):
        """Test per-slice counts stay within the task-configuration total and cover every slice."""
        out = os.path.join(temp_dir, "report")
        ctx = _context(build_cell_table(records, fixture_corpus), fixture_corpus, out)
        ctx.lexicon = load_lexicon(os.path.join(temp_dir, "lexicon.csv"))
        outcome = analyze_difficulty(ctx)
        per_slice = pd.read_csv(os.path.join(out, "correctness_per_slice.csv"), comment="#")
        histogram = pd.read_csv(os.path.join(out, "correctness_histogram.csv"), comment="#")
        assert per_slice["correct"].max() <= 20 * len(CONFIG_IDS)
        assert histogram["slices"].sum() == 70
        assert outcome.summary["slices"] == 70
        assert "ks" in outcome.summary

    def test_perfect_predictions_reach_maximum(self, fixture_corpus, temp_dir):
        """Test every slice reaches 180 correct with all nine configurations right on all twenty tasks."""
        records = [
            PredictionRecord(
                s.visit_id, s.slice_index, task.signal_id, config.config_id,
                fixture_corpus.label(s.visit_id, s.slice_index, task.signal_id), DIRECT,
            )
            for s in fixture_corpus.slices
            for task in SIGNAL_TASKS
            for config in valid_configurations()
        ]
        out = os.path.join(temp_dir, "report")
        analyze_difficulty(_context(build_cell_table(records, fixture_corpus), fixture_corpus, out))
        per_slice = pd.read_csv(os.path.join(out, "correctness_per_slice.csv"), comment="#")
        assert (per_slice["correct"] == 180).all()
        assert (per_slice["abstained"] == 0).all()

    def test_fairness(self, records, fixture_corpus, temp_dir):
        """Test the fairness tables when both race groups are present."""
        out = os.path.join(temp_dir, "report")
        outcome = analyze_fairness(_context(build_cell_table(records, fixture_corpus), fixture_corpus, out))
        assert outcome.ok
        fairness = pd.read_csv(os.path.join(out, "fairness.csv"), comment="#")
        assert len(fairness) == 20
        assert fairness["fisher_p"].between(0, 1).all()
        parity = pd.read_csv(os.path.join(out, "fairness_dpr.csv"), comment="#")
        assert len(parity) == 20 * len(CONFIG_IDS)
        abstained = parity[parity["note"] == "all predictions abstained"]
        assert sorted(zip(abstained["signal_id"], abstained["config_id"])) == [
            ("patient_distress", "FLAN-ZS"),
            ("patient_distress", "Gemma-ZS"),
        ]
        assert abstained["dpr"].isna().all()

    def test_fairness_skipped_without_race(self, records, fixture_corpus, temp_dir):
        """Test fairness is skipped when one race group is missing."""
        cells = build_cell_table(records, fixture_corpus).assign(race="unknown")
        outcome = analyze_fairness(_context(cells, fixture_corpus, os.path.join(temp_dir, "report")))
        assert outcome.status == "skipped"
        assert "race" in outcome.reason

    def test_glmm_missing_reference(self, records, fixture_corpus, temp_dir):
        """Test a model analysis without the reference configuration is skipped."""
        cells = build_cell_table(records, fixture_corpus)
        cells = cells[cells["config_id"] != "FLAN-ZS"].reset_index(drop=True)
        outcome = analyze_glmm(_context(cells, fixture_corpus, os.path.join(temp_dir, "report")), "config")
        assert outcome.status == "skipped"
        assert "FLAN-ZS" in outcome.reason

    def test_empty_cells(self, fixture_corpus, temp_dir):
        """Test analyses skip an empty prediction set."""
        cells = build_cell_table([], fixture_corpus)
        outcomes = run_analyses(_context(cells, fixture_corpus, os.path.join(temp_dir, "report")))
        assert all(o.status == "skipped" for o in outcomes)


class TestRunAnalyses:
    """Test cases for the full report run."""

    def test_all_analyses(self, records, fixture_corpus, temp_dir):
        """Test every analysis reports an outcome and the summary is written."""
        out = os.path.join(temp_dir, "report")
        ctx = _context(build_cell_table(records, fixture_corpus), fixture_corpus, out)
        outcomes = run_analyses(ctx)
        assert [o.name for o in outcomes] == list(ANALYSES)
        assert {o.name for o in outcomes if o.ok} >= {"overall", "fairness", "segments", "ensemble"}

        with open(os.path.join(out, "summary.json")) as f:
            summary = json.load(f)
        assert set(summary) == set(ANALYSES) | {"journal_sha256"}
        with open(os.path.join(out, "overall_ba.md")) as f:
            assert "Ensemble (LOGO)" in f.read()

    def test_unknown_analysis(self, fixture_corpus, temp_dir):
        """Test unknown analysis names are rejected."""
        ctx = _context(build_cell_table([], fixture_corpus), fixture_corpus, os.path.join(temp_dir, "report"))
        with pytest.raises(ValueError, match="sentiment"):
            run_analyses(ctx, ["sentiment"])

    def test_reports_are_reproducible(self, records, fixture_corpus, temp_dir):
        """Test two runs over the same predictions write byte-identical files."""
        sha = journal_hash(os.path.join(temp_dir, "run", PREDICTIONS_NAME))
        contents = []
        for name in ("first", "second"):
            out = os.path.join(temp_dir, name)
            run_analyses(_context(build_cell_table(records, fixture_corpus), fixture_corpus, out, sha))
            files = {}
            for entry in sorted(os.listdir(out)):
                with open(os.path.join(out, entry), "rb") as f:
                    files[entry] = f.read()
            contents.append(files)
        assert contents[0] == contents[1]

    def test_strict_mode_counts_more_cells(self, records, fixture_corpus, temp_dir):
        """Test strict abstention handling evaluates every cell."""
        cells = build_cell_table(records, fixture_corpus)
        lenient = _context(cells, fixture_corpus, os.path.join(temp_dir, "a"))
        strict = _context(cells, fixture_corpus, os.path.join(temp_dir, "b"), strict_abstain=True)
        assert len(strict.scored) == len(cells)
        assert len(lenient.scored) == len(cells) - int(np.isnan(cells["prediction"]).sum())
