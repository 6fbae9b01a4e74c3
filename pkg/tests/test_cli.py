"""Tests for cli module."""

import json
import logging
import os

import pytest
from click.testing import CliRunner

from sigeval.cli import EXIT_BACKEND, cli, main
from sigeval.inference import PREDICTIONS_NAME, MockBackend, TransportError
from tests.conftest import write_config

ANALYZED_CONFIGS = ["--only", "FLAN-ZS", "--only", "Gemma-ZS", "--only", "LLaMA-FS"]


@pytest.fixture
def runner() -> CliRunner:
    return CliRunner()


def _invoke(runner: CliRunner, config_path: str, *args: str):
    return runner.invoke(cli, ["--config", config_path, *args])


def _read_predictions(temp_dir: str):
    with open(os.path.join(temp_dir, "run", PREDICTIONS_NAME)) as f:
        return [json.loads(line) for line in f]


class TestCLI:
    """Test cases for CLI commands."""

    def test_cli_no_command(self, runner):
        """Test CLI with no command shows help."""
        result = runner.invoke(cli)

        assert result.exit_code == 0
        assert "Social Signal Evaluation" in result.output

    def test_invalid_config(self, runner, temp_dir):
        """Test an unparseable configuration file."""
        path = os.path.join(temp_dir, "bad.toml")
        with open(path, "w") as f:
            f.write("seed = = 1\n")
        result = _invoke(runner, path, "validate")

        assert result.exit_code == 1
        assert "not valid TOML" in result.output

    def test_main_unexpected_error(self, mocker, capsys):
        """Test unexpected exceptions are reported with exit code 1."""
        mocker.patch("sigeval.cli.cli", side_effect=RuntimeError("boom"))
        with pytest.raises(SystemExit) as exc_info:
            main()

        assert exc_info.value.code == 1
        assert "Unexpected error: boom" in capsys.readouterr().err

    def test_main_logs_traceback(self, mocker, caplog):
        """Test the unexpected exception's traceback is logged at debug level."""
        caplog.set_level(logging.DEBUG, logger="sigeval.cli")
        mocker.patch("sigeval.cli.cli", side_effect=RuntimeError("boom"))
        with pytest.raises(SystemExit):
            main()

        record = next(r for r in caplog.records if r.name == "sigeval.cli")
        assert record.levelno == logging.DEBUG
        assert record.exc_info[1].args == ("boom",)


class TestValidate:
    """Test cases for the validate command."""

    def test_consistent(self, runner, config_path):
        """Test the fixture configuration and data pass."""
        result = _invoke(runner, config_path, "validate")

        assert result.exit_code == 0
        assert "✓ Configuration and data are consistent" in result.output

    def test_label_for_unknown_visit(self, runner, config_path, fixture_files):
        """Test a label pointing at a missing visit is reported."""
        with open(fixture_files["labels"], "a") as f:
            f.write("v99,0,provider_warmth,3\n")
        result = _invoke(runner, config_path, "validate")

        assert result.exit_code == 1
        assert "unknown visit 'v99'" in result.output

    def test_missing_seed(self, runner, temp_dir, fixture_files):
        """Test a configuration without a seed fails unless one is given."""
        path = write_config(temp_dir)
        with open(path) as f:
            text = f.read().replace("seed = 7\n", "")
        with open(path, "w") as f:
            f.write(text)

        assert _invoke(runner, path, "validate").exit_code == 1
        assert runner.invoke(cli, ["--config", path, "--seed", "3", "validate"]).exit_code == 0


class TestSliceAndPreview:
    """Test cases for the slice and prompt-preview commands."""

    def test_slice(self, runner, config_path, temp_dir):
        """Test slicing writes the filtered slices and prints statistics."""
        result = _invoke(runner, config_path, "slice")

        assert result.exit_code == 0
        assert "Wrote 70 slices from 10 visits" in result.output
        assert "Slices per visit: 7.00 ± 0.00" in result.output
        with open(os.path.join(temp_dir, "run", "slices.jsonl")) as f:
            assert sum(1 for _ in f) == 70

    def test_prompt_preview(self, runner, config_path):
        """Test the compiled prompt is printed."""
        result = _invoke(runner, config_path, "prompt-preview", "-c", "FLAN-ZS", "-t", "provider_warmth")

        assert result.exit_code == 0
        assert "FLAN-ZS / provider_warmth / v01#0" in result.output
        assert "Is the provider warmth higher than normal?" in result.output

    def test_prompt_preview_excluded_configuration(self, runner, config_path):
        """Test an excluded configuration is rejected."""
        result = _invoke(runner, config_path, "prompt-preview", "-c", "FLAN-COT", "-t", "provider_warmth")

        assert result.exit_code == 1
        assert "FLAN-COT" in result.output


class TestRun:
    """Test cases for the run command."""

    def test_run_and_rerun(self, runner, config_path, temp_dir):
        """Test a second run makes no new calls and leaves the predictions unchanged."""
        first = _invoke(runner, config_path, "run", "--only", "FLAN-ZS", "--only", "LLaMA-ZS")
        assert first.exit_code == 0
        assert "2800 new model call(s)" in first.output
        with open(os.path.join(temp_dir, "run", PREDICTIONS_NAME), "rb") as f:
            before = f.read()

        second = _invoke(runner, config_path, "run", "--only", "FLAN-ZS", "--only", "LLaMA-ZS")
        assert second.exit_code == 0
        assert "✓ 0 new model call(s)" in second.output
        with open(os.path.join(temp_dir, "run", PREDICTIONS_NAME), "rb") as f:
            assert f.read() == before

    def test_only_one_configuration(self, runner, config_path, temp_dir):
        """Test --only restricts the run to one configuration."""
        result = _invoke(runner, config_path, "run", "--only", "LLaMA-FS")

        assert result.exit_code == 0
        records = _read_predictions(temp_dir)
        assert {r["config_id"] for r in records} == {"LLaMA-FS"}
        assert len(records) == 70 * 20

    def test_unknown_configuration(self, runner, config_path):
        """Test --only with an excluded configuration fails validation."""
        result = _invoke(runner, config_path, "run", "--only", "Gemma-FSCOT")

        assert result.exit_code == 1
        assert "Gemma-FSCOT" in result.output

    def test_transport_errors_exit_code(self, runner, config_path, mocker):
        """Test unreachable backends give exit code 2."""
        mocker.patch.object(MockBackend, "_complete", side_effect=TransportError("connection refused"))
        result = _invoke(runner, config_path, "run", "--only", "FLAN-ZS")

        assert result.exit_code == EXIT_BACKEND
        assert "transport_error: 1400" in result.output


class TestAnalyze:
    """Test cases for the analyze and ensemble commands."""

    def test_without_predictions(self, runner, config_path):
        """Test analyzing before running."""
        result = _invoke(runner, config_path, "analyze")

        assert result.exit_code == 1
        assert "run 'sigeval run' first" in result.output

    def test_report_is_reproducible(self, runner, config_path, temp_dir):
        """Test the report bundle is written and a rerun gives identical bytes."""
        assert _invoke(runner, config_path, "run", *ANALYZED_CONFIGS).exit_code == 0
        result = _invoke(runner, config_path, "analyze")
        assert result.exit_code == 0
        assert "✓ overall" in result.output

        report = os.path.join(temp_dir, "run", "report")
        for name in ("overall_ba.md", "fairness.csv", "segments_chi2.md", "ensemble.csv", "summary.json"):
            assert os.path.exists(os.path.join(report, name))
        first = {}
        for name in sorted(os.listdir(report)):
            with open(os.path.join(report, name), "rb") as f:
                first[name] = f.read()

        assert _invoke(runner, config_path, "analyze").exit_code == 0
        for name, content in first.items():
            with open(os.path.join(report, name), "rb") as f:
                assert f.read() == content

    def test_fairness_without_race(self, runner, config_path, fixture_files, temp_dir):
        """Test fairness is skipped, not failed, when race metadata is unknown."""
        with open(fixture_files["metadata"]) as f:
            lines = f.read().splitlines()
        with open(fixture_files["metadata"], "w") as f:
            f.write(lines[0] + "\n")
            for line in lines[1:]:
                f.write(line.rsplit(",", 1)[0] + ",unknown\n")

        assert _invoke(runner, config_path, "run", "--only", "LLaMA-ZS").exit_code == 0
        result = _invoke(runner, config_path, "analyze", "-w", "fairness", "-o", "out")

        assert result.exit_code == 0
        assert "fairness skipped" in result.output
        assert not os.path.exists(os.path.join(temp_dir, "out", "fairness.csv"))

    def test_ensemble_command(self, runner, config_path, temp_dir):
        """Test the ensemble command writes its table."""
        assert _invoke(runner, config_path, "run", *ANALYZED_CONFIGS).exit_code == 0
        result = _invoke(runner, config_path, "ensemble", "--lambda", "0.05", "--penalty", "l2", "-o", "ens")

        assert result.exit_code == 0
        assert "L2 ensemble (lambda = 0.05)" in result.output
        assert os.path.exists(os.path.join(temp_dir, "ens", "ensemble.md"))
        assert not os.path.exists(os.path.join(temp_dir, "ens", "summary.json"))
