"""Main CLI interface for sigeval."""

import logging
import os
from typing import Dict, List, Optional, Tuple

import click

from .analysis import ANALYSES, AnalysisContext, analyze_ensemble, build_cell_table, run_analyses
from .config import ConfigError, RunConfig, load_config
from .corpus import (
    CorpusError,
    corpus_problems,
    get_task,
    ingest_transcripts,
    load_labels,
    load_metadata,
    write_slices,
)
from .difficulty import DifficultyError, load_lexicon
from .ensemble import EnsembleError
from .inference import (
    JOURNAL_NAME,
    PREDICTIONS_NAME,
    TRANSPORT_ERROR,
    InferenceError,
    PredictionJournal,
    read_predictions,
    run_experiment,
)
from .metrics import MetricError
from .mixedglm import GlmmError
from .prompts import PromptError, compile_prompt, get_configuration
from .reports import ReportWriter, journal_hash
from .stats import StatsError
from .utils import error_exit, info_message, setup_logging, success_message, warning_message

LOGGER = logging.getLogger(__name__)

HARNESS_ERRORS = (
    ConfigError,
    CorpusError,
    PromptError,
    InferenceError,
    MetricError,
    StatsError,
    GlmmError,
    EnsembleError,
    DifficultyError,
)

EXIT_BACKEND = 2


@click.group(invoke_without_command=True)
@click.option(
    "--config",
    "config_path",
    type=click.Path(exists=True, dir_okay=False),
    help="TOML run configuration",
)
@click.option("--seed", type=int, help="Seed for few-shot selection (overrides the config)")
@click.option("--run-dir", type=click.Path(file_okay=False), help="Directory for journal and reports")
@click.option("-v", "--verbose", count=True, help="Log progress (-vv for debug output)")
@click.pass_context
def cli(ctx, config_path: Optional[str], seed: Optional[int], run_dir: Optional[str], verbose: int):
    """sigeval - Social Signal Evaluation

    Run prompted language models over thin-sliced clinical transcripts and
    report how well they track patient and provider social signals.
    """
    setup_logging(verbose)
    ctx.ensure_object(dict)
    ctx.obj.update(config_path=config_path, seed=seed, run_dir=run_dir)
    if ctx.invoked_subcommand is None:
        click.echo(ctx.get_help())


def _load(ctx, **overrides) -> RunConfig:
    """Load the run configuration with the global flags applied."""
    obj = ctx.find_root().obj or {}
    overrides.update(seed=obj.get("seed"), run_dir=obj.get("run_dir"))
    try:
        return load_config(obj.get("config_path"), overrides)
    except ConfigError as e:
        error_exit(str(e))


def _data_problems(config: RunConfig, require_groups: bool) -> List[str]:
    """Parse the data files and cross-check them."""
    problems = []
    try:
        visits = ingest_transcripts(config.paths.transcripts)
        labels = load_labels(config.paths.labels)
        metadata = load_metadata(config.paths.metadata) if config.paths.metadata else None
    except CorpusError as e:
        return [str(e)]
    if metadata is None and require_groups:
        problems.append("paths.metadata is not set; the ensemble needs provider groups")
    problems.extend(corpus_problems(visits, labels, metadata, config.slice_len_s, require_groups))
    return problems


@cli.command("validate")
@click.option("--no-ensemble", is_flag=True, help="Do not require provider groups")
@click.pass_context
def validate(ctx, no_ensemble: bool):
    """Check the configuration and the consistency of the data files."""
    config = _load(ctx)
    problems = config.validate()
    if config.paths.transcripts and config.paths.labels and not problems:
        problems.extend(_data_problems(config, require_groups=not no_ensemble))

    if problems:
        for problem in problems:
            click.echo(f"  ✗ {problem}")
        error_exit(f"{len(problems)} problem(s) found")
    success_message("✓ Configuration and data are consistent")


@cli.command("slice")
@click.option("-o", "--output", type=click.Path(dir_okay=False), help="Slice file (default: <run-dir>/slices.jsonl)")
@click.pass_context
def slice_command(ctx, output: Optional[str]):
    """Slice the transcripts and print dataset statistics."""
    config = _load(ctx)
    try:
        corpus = config.load_corpus()
        output = output or os.path.join(config.paths.run_dir, "slices.jsonl")
        os.makedirs(os.path.dirname(os.path.abspath(output)), exist_ok=True)
        count = write_slices(corpus.slices, output)
    except HARNESS_ERRORS as e:
        error_exit(str(e))

    success_message(f"✓ Wrote {count} slices from {len(corpus.visits)} visits to {output}")
    labels = {"slices_per_visit": "Slices per visit", "words_per_slice": "Words per slice"}
    for key, (mean, sd) in corpus.summary().items():
        name = labels.get(key, f"Words per {key.split('_', 1)[1]} slice")
        info_message(f"  {name}: {mean:.2f} ± {sd:.2f}")


@cli.command("prompt-preview")
@click.option("-c", "--configuration", "config_id", required=True, help="Configuration id, e.g. LLaMA-FS")
@click.option("-t", "--task", "signal_id", required=True, help="Signal id, e.g. provider_warmth")
@click.option("--visit", "visit_id", help="Visit of the target slice (default: first labeled slice)")
@click.option("--slice", "slice_index", type=int, help="Index of the target slice")
@click.pass_context
def prompt_preview(ctx, config_id: str, signal_id: str, visit_id: Optional[str], slice_index: Optional[int]):
    """Print the prompt compiled for one slice."""
    config = _load(ctx)
    try:
        configuration = get_configuration(config_id)
        task = get_task(signal_id)
        corpus = config.load_corpus()
        candidates = corpus.labeled_slices(task) or corpus.slices
        if visit_id is not None:
            candidates = [
                s for s in corpus.slices
                if s.visit_id == visit_id and (slice_index is None or s.slice_index == slice_index)
            ]
        if not candidates:
            error_exit("No slice matches the selection")
        target = candidates[0]
        bank = config.load_bank(corpus) if configuration.strategy.uses_examples else None
        prompt = compile_prompt(
            configuration,
            task,
            target,
            bank,
            config.analysis.few_shot_k,
            config.seed or 0,
            config.load_templates(),
        )
    except HARNESS_ERRORS as e:
        error_exit(str(e))

    info_message(f"{prompt.config_id} / {prompt.signal_id} / {target.visit_id}#{target.slice_index}")
    click.echo(prompt.full_text)


@cli.command("run")
@click.option("--only", "only", multiple=True, help="Run only these configuration ids (repeatable)")
@click.option("--max-in-flight", type=click.IntRange(min=1), help="Concurrent requests per backend")
@click.pass_context
def run(ctx, only: Tuple[str, ...], max_in_flight: Optional[int]):
    """Predict every labeled slice for every enabled configuration."""
    config = _load(ctx, configs=only or None)
    problems = config.validate()
    if problems:
        for problem in problems:
            click.echo(f"  ✗ {problem}")
        error_exit("Configuration is not valid; run 'sigeval validate' for details")

    try:
        corpus = config.load_corpus()
        configs = config.selected_configs()
        tasks = config.selected_tasks()
        bank = config.load_bank(corpus) if any(c.strategy.uses_examples for c in configs) else None
        backends = config.build_backends(max_in_flight)

        expected = {
            (s.visit_id, s.slice_index, t.signal_id, c.config_id)
            for c in configs
            for t in tasks
            for s in corpus.labeled_slices(t)
        }
        journal = PredictionJournal(os.path.join(config.paths.run_dir, JOURNAL_NAME))
        done = {k for k, r in journal.load().items() if r.parse_status != TRANSPORT_ERROR}
        already = len(expected & done)
        info_message(
            f"Running {len(configs)} configuration(s) x {len(tasks)} task(s): "
            f"{len(expected)} predictions, {already} already journaled"
        )

        with click.progressbar(length=len(expected), label="Predicting") as bar:
            bar.update(already)
            result = run_experiment(
                corpus,
                configs,
                tasks,
                backends,
                config.paths.run_dir,
                bank=bank,
                k_per_class=config.analysis.few_shot_k,
                seed=config.seed,
                templates=config.load_templates(),
                progress=bar.update,
            )
    except HARNESS_ERRORS as e:
        error_exit(str(e))
    except KeyboardInterrupt:
        error_exit("Operation cancelled by user; the journal keeps finished predictions")

    success_message(f"✓ {result.new_calls} new model call(s); {len(result.records)} predictions journaled")
    for status, count in sorted(result.status_counts.items()):
        info_message(f"  {status}: {count}")
    if result.transport_errors:
        error_exit(
            f"{result.transport_errors} prediction(s) failed at the backend; rerun to retry them",
            EXIT_BACKEND,
        )


def _analysis_context(ctx, out_dir: Optional[str]) -> Tuple[RunConfig, AnalysisContext]:
    config = _load(ctx)
    predictions = os.path.join(config.paths.run_dir, PREDICTIONS_NAME)
    if not os.path.isfile(predictions):
        error_exit(f"No predictions at '{predictions}'; run 'sigeval run' first")
    try:
        corpus = config.load_corpus()
        cells = build_cell_table(read_predictions(predictions), corpus)
        lexicon = load_lexicon(config.paths.lexicon) if config.paths.lexicon else None
    except HARNESS_ERRORS as e:
        error_exit(str(e))
    writer = ReportWriter(out_dir or os.path.join(config.paths.run_dir, "report"), journal_hash(predictions))
    return config, AnalysisContext(cells, corpus, writer, config.analysis, lexicon)


@cli.command("analyze")
@click.option(
    "-w",
    "--which",
    multiple=True,
    type=click.Choice(ANALYSES),
    help="Analyses to run (repeatable; default: all)",
)
@click.option("-o", "--out", "out_dir", type=click.Path(file_okay=False), help="Report directory (default: <run-dir>/report)")
@click.pass_context
def analyze(ctx, which: Tuple[str, ...], out_dir: Optional[str]):
    """Write the report bundle for the journaled predictions."""
    _, context = _analysis_context(ctx, out_dir)
    try:
        outcomes = run_analyses(context, which or ANALYSES)
    except HARNESS_ERRORS as e:
        error_exit(str(e))

    for outcome in outcomes:
        if outcome.ok:
            success_message(f"✓ {outcome.name}")
        else:
            warning_message(f"{outcome.name} skipped: {outcome.reason}")
    info_message(f"Report written to {context.writer.out_dir}")


@cli.command("ensemble")
@click.option("--lambda", "lam", type=click.FloatRange(min=0.0), help="Penalty strength (default from config)")
@click.option("--penalty", type=click.Choice(["l1", "l2"]), help="Penalty type (default from config)")
@click.option("-o", "--out", "out_dir", type=click.Path(file_okay=False), help="Report directory (default: <run-dir>/report)")
@click.pass_context
def ensemble(ctx, lam: Optional[float], penalty: Optional[str], out_dir: Optional[str]):
    """Evaluate the penalized logistic ensemble with leave-one-provider-group-out folds."""
    _, context = _analysis_context(ctx, out_dir)
    try:
        outcome = analyze_ensemble(context, lam, penalty)
    except HARNESS_ERRORS as e:
        error_exit(str(e))

    if not outcome.ok:
        warning_message(f"ensemble skipped: {outcome.reason}")
        return
    summary: Dict = outcome.summary
    mean_ba = summary["mean_ba"]
    success_message(
        f"✓ {summary['penalty'].upper()} ensemble (lambda = {summary['lambda']:g}): "
        f"mean balanced accuracy {mean_ba:.3f}" if mean_ba is not None else "✓ ensemble: no folds evaluated"
    )
    for result in context.ensemble or []:
        nonzero = [c for c, n in result.nonzero_counts.items() if n]
        info_message(f"  {result.signal_id}: {', '.join(nonzero) or 'no nonzero weights'}")


def main():
    """Entry point for the sigeval CLI."""
    try:
        cli()
    except Exception as e:
        LOGGER.debug("Unhandled exception", exc_info=True)
        error_exit(f"Unexpected error: {e}")


if __name__ == "__main__":
    main()
