"""The report analyses run over a prediction set and its corpus."""

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from .config import AnalysisConfig
from .corpus import SIGNAL_TASKS, Corpus, Race, Segment, SignalType, get_task
from .difficulty import DifficultyError, Lexicon, compare_groups, feature_table, split_quantiles
from .ensemble import EnsembleError, TaskEnsemble, ensemble_evaluate
from .inference import ABSTAIN, LOGIT_FALLBACK, LOGPROBS_MISSING, TRANSPORT_ERROR, PredictionRecord
from .metrics import (
    correctness_matrix,
    group_balanced_accuracy,
    label_prevalence,
    parity_table,
    scored_cells,
    summarize_across_configs,
)
from .mixedglm import GLMM_ANALYSES, GlmmError, fit_binomial_glmm, odds_ratio_table
from .prompts import PromptError, get_configuration, valid_configurations
from .reports import MISSING, ReportWriter, emphasize, format_mean_sd, markdown_table, with_stars
from .stats import StatsError, bonferroni, chi_squared_independence, fisher_exact_2x2, ks_normality

LOGGER = logging.getLogger(__name__)

ANALYSES = (
    "overall",
    "glmm-model",
    "glmm-prompt",
    "glmm-config",
    "glmm-task",
    "difficulty",
    "fairness",
    "segments",
    "ensemble",
)

FACTOR_NAMES = {
    "visit_id": "visit",
    "signal_id": "task",
    "config_id": "configuration",
    "prompt": "prompt",
    "model": "model",
}

CELL_COLUMNS = [
    "visit_id", "slice_index", "signal_id", "config_id", "model", "prompt",
    "label", "prediction", "parse_status", "abstain_reason", "segment", "race", "provider_group",
]


@dataclass
class AnalysisOutcome:
    name: str
    status: str = "ok"
    reason: Optional[str] = None
    summary: Dict[str, Any] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def skipped(name: str, reason: str) -> AnalysisOutcome:
    LOGGER.info("Skipping %s: %s", name, reason)
    return AnalysisOutcome(name, "skipped", reason)


def build_cell_table(records: Sequence[PredictionRecord], corpus: Corpus) -> pd.DataFrame:
    """One row per labeled (slice, task, configuration) prediction.

    ``prediction`` is NaN for abstentions and transport errors. Records whose
    slice or label is not in the corpus are dropped.
    """
    slices = corpus.slice_index
    rows = []
    dropped = 0
    for record in records:
        slice_ = slices.get((record.visit_id, record.slice_index))
        label = corpus.label(record.visit_id, record.slice_index, record.signal_id)
        try:
            config = get_configuration(record.config_id)
        except PromptError:
            config = None
        if slice_ is None or label is None or config is None:
            dropped += 1
            continue
        meta = corpus.metadata.get(record.visit_id)
        rows.append(
            {
                "visit_id": record.visit_id,
                "slice_index": record.slice_index,
                "signal_id": record.signal_id,
                "config_id": config.config_id,
                "model": config.model,
                "prompt": config.strategy.value,
                "label": label,
                "prediction": float(record.prediction) if record.prediction is not None else np.nan,
                "parse_status": record.parse_status,
                "abstain_reason": record.abstain_reason or "",
                "segment": slice_.segment.value,
                "race": meta.patient_race.value if meta else Race.UNKNOWN.value,
                "provider_group": meta.provider_group if meta else "",
            }
        )
    if dropped:
        LOGGER.warning("Ignored %d predictions without a matching slice, label or configuration", dropped)
    cells = pd.DataFrame(rows, columns=CELL_COLUMNS)
    return cells.sort_values(["visit_id", "slice_index", "signal_id", "config_id"]).reset_index(drop=True)


def _task_order(cells: pd.DataFrame) -> List[str]:
    present = set(cells["signal_id"])
    return [t.signal_id for t in SIGNAL_TASKS if t.signal_id in present]


def _config_order(cells: pd.DataFrame) -> List[str]:
    present = set(cells["config_id"])
    return [c.config_id for c in valid_configurations() if c.config_id in present]


def _title(signal_id: str) -> str:
    return get_task(signal_id).title


@dataclass
class AnalysisContext:
    """Inputs shared by all analyses of one report run."""

    cells: pd.DataFrame
    corpus: Corpus
    writer: ReportWriter
    options: AnalysisConfig = field(default_factory=AnalysisConfig)
    lexicon: Optional[Lexicon] = None
    ensemble: Optional[List[TaskEnsemble]] = None

    @property
    def scored(self) -> pd.DataFrame:
        return scored_cells(self.cells, self.options.strict_abstain)


def analyze_overall(ctx: AnalysisContext) -> AnalysisOutcome:
    """Balanced accuracy per task and configuration, dataset statistics, label prevalence, abstentions."""
    cells, writer = ctx.cells, ctx.writer
    if cells.empty:
        return skipped("overall", "no predictions with labels")

    table = group_balanced_accuracy(cells, "task_config", ctx.options.strict_abstain)
    writer.write_csv("overall_ba", table)

    configs = _config_order(cells)
    ensemble = {r.signal_id: r for r in ctx.ensemble or []}
    headers = ["Task"] + configs + (["Ensemble (LOGO)"] if ensemble else [])
    lookup = {(r.signal_id, r.config_id): r for r in table.itertuples(index=False)}
    rows = []
    for signal_type in SignalType:
        tasks = [t for t in _task_order(cells) if get_task(t).signal_type == signal_type]
        if not tasks:
            continue
        rows.append([f"**{signal_type.value.replace('Type', 'Type-')}**"] + [""] * (len(headers) - 1))
        per_config: Dict[str, List[float]] = {c: [] for c in configs}
        for signal_id in tasks:
            row = [_title(signal_id)]
            for config_id in configs:
                cell = lookup.get((signal_id, config_id))
                if cell is None or cell.balanced_accuracy is None or pd.isna(cell.balanced_accuracy):
                    row.append(MISSING)
                    continue
                per_config[config_id].append(cell.balanced_accuracy)
                row.append(f"{cell.balanced_accuracy:.3f}" + ("†" if cell.degenerate else ""))
            if ensemble:
                result = ensemble.get(signal_id)
                row.append(format_mean_sd(result.mean_ba, result.sd_ba) if result else MISSING)
            rows.append(row)
        for label, reducer in (("MEAN", np.mean), ("STD", np.std)):
            summary_row = [label]
            for config_id in configs:
                values = per_config[config_id]
                summary_row.append(f"{reducer(values):.3f}" if values else MISSING)
            if ensemble:
                means = [ensemble[t].mean_ba for t in tasks if t in ensemble and ensemble[t].mean_ba is not None]
                summary_row.append(f"{reducer(means):.3f}" if means else MISSING)
            rows.append(summary_row)
    writer.write_markdown(
        "overall_ba",
        markdown_table(headers, rows) + "\n† one label class absent: value is the recall of the present class.\n",
        title="Balanced accuracy per task and configuration",
    )

    stats = ctx.corpus.summary()
    dataset = pd.DataFrame(
        [{"statistic": k, "mean": v[0], "sd": v[1]} for k, v in stats.items()]
    )
    writer.write_table(
        "dataset_stats",
        dataset,
        markdown_table(
            ["Statistic", "Mean ± SD"],
            [[k, f"{v[0]:.2f} ± {v[1]:.2f}"] for k, v in stats.items()],
        ),
        title="Dataset statistics",
    )

    labels = cells.drop_duplicates(subset=["visit_id", "slice_index", "signal_id"])
    prevalence = label_prevalence(labels)
    writer.write_csv("label_prevalence", prevalence)

    abstentions = (
        cells.assign(
            abstained=cells["parse_status"] == ABSTAIN,
            logprobs_missing=cells["abstain_reason"] == LOGPROBS_MISSING,
            transport_error=cells["parse_status"] == TRANSPORT_ERROR,
            logit_fallback=cells["parse_status"] == LOGIT_FALLBACK,
        )
        .groupby("config_id", sort=True)[["abstained", "logprobs_missing", "transport_error", "logit_fallback"]]
        .sum()
        .astype(int)
        .reset_index()
    )
    abstentions["n"] = cells.groupby("config_id", sort=True).size().to_numpy()
    abstentions["abstention_rate"] = abstentions["abstained"] / abstentions["n"]
    writer.write_table("abstentions", abstentions, title="Abstentions per configuration")

    return AnalysisOutcome(
        "overall",
        summary={
            "cells": int(len(cells)),
            "tasks": len(_task_order(cells)),
            "configs": configs,
            "abstained": int(abstentions["abstained"].sum()),
            "mean_ba": float(table["balanced_accuracy"].dropna().mean()),
        },
    )


def analyze_glmm(ctx: AnalysisContext, name: str) -> AnalysisOutcome:
    """Mixed-model odds ratios for one of the model, prompt, config and task factors."""
    analysis = f"glmm-{name}"
    if name not in GLMM_ANALYSES:
        raise GlmmError(f"Unknown mixed-model analysis '{name}'")
    scored = ctx.scored
    if scored.empty:
        return skipped(analysis, "no scored predictions")

    spec = replace(GLMM_ANALYSES[name], max_iter=ctx.options.glmm_max_iter)
    data = scored.assign(correct=scored["correct"].astype(int))
    if spec.reference is not None and spec.reference not in set(data[spec.fixed_factor]):
        return skipped(analysis, f"reference level '{spec.reference}' has no predictions")
    try:
        fit = fit_binomial_glmm(data, spec)
    except GlmmError as e:
        return skipped(analysis, str(e))

    sort = "ascending_or" if name == "task" else "none"
    table = odds_ratio_table(fit, sort)
    footer = "Random Var (" + ", ".join(
        f"{FACTOR_NAMES.get(f, f)} = {v:.2f}" for f, v in fit.random_variances.items()
    ) + ")"

    if name == "task":
        rows = [
            [_title(r.level), f"{r.coef:.3f}", f"{r.odds_ratio:.3f}", f"{r.abs_1_minus_or:.3f}", r.band]
            for r in table.itertuples(index=False)
        ]
        body = markdown_table(["Task", "Coefficient", "OR", "abs(1-OR)", "Difficulty"], rows)
    else:
        rows = []
        for r in table.itertuples(index=False):
            if r.is_reference:
                rows.append([f"{r.level} (Intercept)", f"{r.coef:.3f} [{r.odds_ratio:.3f}]", ""])
            else:
                rows.append([r.level, f"{r.coef:.3f}", f"{r.odds_ratio:.3f}"])
        body = markdown_table([FACTOR_NAMES.get(spec.fixed_factor, spec.fixed_factor).title(), "Log-odds", "OR"], rows)
    status_line = "" if fit.converged else "\nWarning: the optimizer did not converge.\n"
    writer = ctx.writer
    writer.write_csv(f"glmm_{name}", table)
    writer.write_markdown(
        f"glmm_{name}",
        body + "\n" + footer + "\n" + status_line,
        title=f"Mixed model: correctness ~ {FACTOR_NAMES.get(spec.fixed_factor, spec.fixed_factor)}",
    )
    return AnalysisOutcome(
        analysis,
        summary={
            "converged": fit.converged,
            "log_likelihood": fit.log_likelihood,
            "random_variances": fit.random_variances,
            "odds_ratios": fit.odds_ratios,
        },
    )


def analyze_difficulty(ctx: AnalysisContext) -> AnalysisOutcome:
    """Correct-count histogram, normality check, hard/easy split and feature comparison."""
    if ctx.cells.empty:
        return skipped("difficulty", "no predictions with labels")
    _, per_slice = correctness_matrix(ctx.cells, ctx.options.strict_abstain)
    writer = ctx.writer
    writer.write_csv("correctness_per_slice", per_slice)
    histogram = per_slice.groupby("correct").size().rename("slices").reset_index()
    writer.write_csv("correctness_histogram", histogram)

    summary: Dict[str, Any] = {"slices": int(len(per_slice))}
    try:
        ks = ks_normality(per_slice["correct"].to_numpy(float))
        summary["ks"] = {"D": ks.statistic, "p": ks.p_value, "caveat": ks.caveat}
    except StatsError as e:
        summary["ks"] = {"note": str(e)}

    counts = {
        (row.visit_id, row.slice_index): row.correct for row in per_slice.itertuples(index=False)
    }
    try:
        split = split_quantiles(counts, ctx.options.quantile)
    except DifficultyError as e:
        outcome = skipped("difficulty", str(e))
        outcome.summary = summary
        return outcome

    slices = ctx.corpus.slice_index
    texts = {key: slices[key].text for key in split.hard + split.easy if key in slices}
    features = feature_table(texts, ctx.lexicon)
    try:
        comparison = compare_groups(features, split.hard, split.easy)
    except DifficultyError as e:
        return skipped("difficulty", str(e))

    rows = [
        [
            r.feature,
            format_mean_sd(r.hard_mean, r.hard_sd, 2, 2),
            format_mean_sd(r.easy_mean, r.easy_sd, 2, 2),
            with_stars(f"{r.u_statistic:.1f}", r.corrected_p),
        ]
        for r in comparison.itertuples(index=False)
    ]
    note = (
        f"\nHard: correct count <= {split.low_cut:g} (n = {len(split.hard)}); "
        f"easy: correct count >= {split.high_cut:g} (n = {len(split.easy)}). "
        "Mann-Whitney U with Bonferroni correction: * p<0.05, ** p<0.01, *** p<0.001.\n"
    )
    if ctx.lexicon is None:
        note += "No lexicon configured: surface features only.\n"
    writer.write_csv("difficulty_features", comparison)
    writer.write_markdown(
        "difficulty_features",
        markdown_table(["Feature", "Hard mean (std)", "Easy mean (std)", "U"], rows) + note,
        title="Lexicon features of hard and easy slices",
    )
    summary.update(
        hard=len(split.hard),
        easy=len(split.easy),
        low_cut=split.low_cut,
        high_cut=split.high_cut,
        significant=[r.feature for r in comparison.itertuples(index=False) if r.corrected_p < 0.05],
    )
    return AnalysisOutcome("difficulty", summary=summary)


def _race_groups(cells: pd.DataFrame) -> List[str]:
    return [r.value for r in (Race.WHITE, Race.NON_WHITE) if r.value in set(cells["race"])]


def analyze_fairness(ctx: AnalysisContext) -> AnalysisOutcome:
    """Label prevalence and balanced accuracy by patient race, Fisher tests and parity ratios."""
    cells = ctx.cells
    if cells.empty:
        return skipped("fairness", "no predictions with labels")
    if len(_race_groups(cells)) < 2:
        return skipped("fairness", "race metadata does not cover both white and non-white patients")

    white, non_white = Race.WHITE.value, Race.NON_WHITE.value
    labels = cells.drop_duplicates(subset=["visit_id", "slice_index", "signal_id"])
    ba = group_balanced_accuracy(cells, "task_config_race", ctx.options.strict_abstain)
    by_race = summarize_across_configs(ba, ["signal_id", "race"])
    ba_lookup = {(r.signal_id, r.race): r for r in by_race.itertuples(index=False)}

    records, rows = [], []
    for signal_id in _task_order(cells):
        task_labels = labels[labels["signal_id"] == signal_id]
        groups = {race: task_labels.loc[task_labels["race"] == race, "label"].to_numpy() for race in (white, non_white)}
        table = [[int(groups[r].sum()), int(len(groups[r]) - groups[r].sum())] for r in (white, non_white)]
        try:
            fisher = fisher_exact_2x2(table)
            odds_ratio, p_value = fisher.statistic, fisher.p_value
        except StatsError:
            odds_ratio, p_value = float("nan"), float("nan")

        record = {"signal_id": signal_id, "fisher_odds_ratio": odds_ratio, "fisher_p": p_value}
        row = [_title(signal_id)]
        for race in (white, non_white):
            values = groups[race]
            mean = float(values.mean()) if len(values) else float("nan")
            sd = float(values.std()) if len(values) else float("nan")
            record[f"label_mean_{race}"], record[f"label_sd_{race}"] = mean, sd
            row.append(format_mean_sd(mean, sd, 2, 2))
        row.append(MISSING if np.isnan(p_value) else with_stars(f"{odds_ratio:.2f}", p_value))
        degenerate = False
        for race in (white, non_white):
            cell = ba_lookup.get((signal_id, race))
            if cell is None:
                record[f"ba_mean_{race}"] = record[f"ba_sd_{race}"] = float("nan")
                row.append(MISSING)
                continue
            degenerate = degenerate or bool(cell.degenerate)
            record[f"ba_mean_{race}"], record[f"ba_sd_{race}"] = cell.mean, cell.sd
            row.append(emphasize(cell.mean, format_mean_sd(cell.mean, cell.sd)))
        record["degenerate"] = degenerate
        row[0] += "†" if degenerate else ""
        records.append(record)
        rows.append(row)

    writer = ctx.writer
    writer.write_csv("fairness", pd.DataFrame(records))
    writer.write_markdown(
        "fairness",
        markdown_table(
            ["Task", "Label White", "Label Non-White", "Statistical Difference (OR)", "BA White", "BA Non-White"],
            rows,
        )
        + "\nLabels: mean (sd) of binary labels. BA: mean (sd) over configurations; bold > 0.55, "
        "underlined < 0.5. Fisher exact test: * p<0.05, ** p<0.01, *** p<0.001. "
        "† a configuration cell lacks one label class.\n",
        title="Labels and balanced accuracy by patient race",
    )

    parity = parity_table(cells, (white, non_white), ctx.options.strict_abstain)
    writer.write_csv("fairness_dpr", parity)
    return AnalysisOutcome(
        "fairness",
        summary={
            "flagged": int(parity["flagged"].sum()) if not parity.empty else 0,
            "undefined": int(parity["dpr"].isna().sum()) if not parity.empty else 0,
            "pairs": int(len(parity)),
        },
    )


def analyze_segments(ctx: AnalysisContext) -> AnalysisOutcome:
    """Correctness by start/middle/end segment: chi-squared tests and per-segment accuracy."""
    scored = ctx.scored
    if scored.empty:
        return skipped("segments", "no scored predictions")
    segments = [s.value for s in Segment]
    tasks = _task_order(scored)

    results = []
    for signal_id in tasks:
        task_cells = scored[scored["signal_id"] == signal_id]
        table = [
            [int(((task_cells["segment"] == s) & task_cells["correct"]).sum()) for s in segments],
            [int(((task_cells["segment"] == s) & ~task_cells["correct"]).sum()) for s in segments],
        ]
        try:
            test = chi_squared_independence(table)
            results.append((signal_id, test.statistic, test.p_value, test.df))
        except StatsError:
            results.append((signal_id, None, None, None))

    tested = [r for r in results if r[2] is not None]
    corrected = dict(zip([r[0] for r in tested], bonferroni([r[2] for r in tested], max(len(results), 1))))
    chi_frame = pd.DataFrame(
        [
            {"signal_id": s, "chi2": stat, "df": df, "p_value": p, "corrected_p": corrected.get(s)}
            for s, stat, p, df in results
        ]
    )
    chi_rows = [
        [_title(s), MISSING if stat is None else with_stars(f"{stat:.2f}", corrected[s])]
        for s, stat, _, _ in results
    ]

    writer = ctx.writer
    writer.write_csv("segments_chi2", chi_frame)
    writer.write_markdown(
        "segments_chi2",
        markdown_table(["Task", "Statistic χ²(2)"], chi_rows)
        + "\nPearson chi-squared test of independence between correctness and segment, pooled over "
        "configurations; not a within-subject test. Bonferroni correction: * p<0.05, ** p<0.01, "
        "*** p<0.001. -- marks a table with a zero margin.\n",
        title="Correctness by segment",
    )

    ba = group_balanced_accuracy(ctx.cells, "task_config_segment", ctx.options.strict_abstain)
    by_segment = summarize_across_configs(ba, ["signal_id", "segment"])
    lookup = {(r.signal_id, r.segment): r for r in by_segment.itertuples(index=False)}
    rows = []
    task_means: Dict[str, List[float]] = {s: [] for s in segments}
    for signal_id in tasks:
        row = [_title(signal_id)]
        for segment in segments:
            cell = lookup.get((signal_id, segment))
            if cell is None:
                row.append(MISSING)
                continue
            task_means[segment].append(cell.mean)
            row.append(emphasize(cell.mean, format_mean_sd(cell.mean, cell.sd)))
        rows.append(row)
    averaged = ["Averaged Performance"]
    for segment in segments:
        values = task_means[segment]
        averaged.append(
            format_mean_sd(float(np.mean(values)), float(np.std(values))) if values else MISSING
        )
    rows.append(averaged)
    writer.write_csv("segments_ba", by_segment)
    writer.write_markdown(
        "segments_ba",
        markdown_table(["Task"] + [s.title() for s in segments], rows)
        + "\nMean (sd) balanced accuracy over configurations; bold > 0.55, underlined < 0.5. "
        "Averaged Performance: mean (sd) over tasks.\n",
        title="Balanced accuracy by segment",
    )
    return AnalysisOutcome(
        "segments",
        summary={"significant": [s for s, p in corrected.items() if p < 0.05], "untestable": len(results) - len(tested)},
    )


def analyze_ensemble(
    ctx: AnalysisContext, lam: Optional[float] = None, penalty: Optional[str] = None
) -> AnalysisOutcome:
    """Leave-one-provider-group-out penalized logistic ensemble per task."""
    cells = ctx.cells
    if cells.empty:
        return skipped("ensemble", "no predictions with labels")
    lam = ctx.options.ensemble_lambda if lam is None else lam
    penalty = penalty or ctx.options.ensemble_penalty
    configs = _config_order(cells)
    try:
        results = ensemble_evaluate(
            cells, ctx.corpus.metadata, configs, lam, penalty, signal_ids=_task_order(cells)
        )
    except EnsembleError as e:
        return skipped("ensemble", str(e))
    ctx.ensemble = results

    groups = sorted({g for r in results for g in list(r.fold_scores) + list(r.skipped_folds)})
    records, rows = [], []
    for result in results:
        record = {"signal_id": result.signal_id, "mean_ba": result.mean_ba, "sd_ba": result.sd_ba}
        for group in groups:
            record[f"fold_{group}"] = result.fold_scores.get(group)
        nonzero = [c for c, n in result.nonzero_counts.items() if n]
        record["nonzero_configs"] = ";".join(nonzero)
        record["skipped_folds"] = ";".join(f"{g}: {why}" for g, why in sorted(result.skipped_folds.items()))
        records.append(record)
        rows.append(
            [_title(result.signal_id), format_mean_sd(result.mean_ba, result.sd_ba), ", ".join(nonzero) or "none"]
        )

    writer = ctx.writer
    writer.write_csv("ensemble", pd.DataFrame(records))
    writer.write_markdown(
        "ensemble",
        markdown_table(["Task", "Ensemble (LOGO)", "Nonzero weights"], rows)
        + f"\nLogistic regression with {penalty.upper()} penalty (lambda = {lam:g}) over binary "
        "configuration outputs; abstentions enter as 0.5. Mean (sd) over held-out provider groups.\n",
        title="Ensemble balanced accuracy",
    )
    means = [r.mean_ba for r in results if r.mean_ba is not None]
    return AnalysisOutcome(
        "ensemble",
        summary={"penalty": penalty, "lambda": lam, "mean_ba": float(np.mean(means)) if means else None},
    )


def _runner(name: str) -> Callable[[AnalysisContext], AnalysisOutcome]:
    if name.startswith("glmm-"):
        factor = name.split("-", 1)[1]
        return lambda ctx: analyze_glmm(ctx, factor)
    return {
        "overall": analyze_overall,
        "difficulty": analyze_difficulty,
        "fairness": analyze_fairness,
        "segments": analyze_segments,
        "ensemble": analyze_ensemble,
    }[name]


def run_analyses(ctx: AnalysisContext, which: Sequence[str] = ANALYSES) -> List[AnalysisOutcome]:
    """Run the requested analyses in a fixed order and write summary.json.

    The ensemble runs before the overall table so its column can be filled.
    """
    unknown = set(which) - set(ANALYSES)
    if unknown:
        raise ValueError(f"Unknown analyses: {', '.join(sorted(unknown))}")
    order = [a for a in ANALYSES if a in which]
    if "ensemble" in order and "overall" in order:
        order.remove("ensemble")
        order.insert(0, "ensemble")

    outcomes = []
    for name in order:
        LOGGER.info("Running analysis %s", name)
        outcomes.append(_runner(name)(ctx))
    ctx.writer.write_summary(
        {o.name: {"status": o.status, "reason": o.reason, **o.summary} for o in outcomes}
    )
    return [o for name in ANALYSES for o in outcomes if o.name == name]
