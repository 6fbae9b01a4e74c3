"""Balanced accuracy, correctness aggregates and demographic parity."""

import logging
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

LOGGER = logging.getLogger(__name__)

KEY_COLUMNS = ["visit_id", "slice_index", "signal_id", "config_id"]

# Grouping name -> cell-table columns.
GROUPINGS: Dict[str, List[str]] = {
    "task": ["signal_id"],
    "config": ["config_id"],
    "task_config": ["signal_id", "config_id"],
    "segment": ["segment"],
    "race": ["race"],
    "task_race": ["signal_id", "race"],
    "task_segment": ["signal_id", "segment"],
    "task_config_race": ["signal_id", "config_id", "race"],
    "task_config_segment": ["signal_id", "config_id", "segment"],
}

FOUR_FIFTHS = 0.8


class MetricError(Exception):
    """Exception raised for undefined metrics and bad groupings."""

    pass


class IntegrityError(MetricError):
    """Raised when a prediction key occurs more than once."""

    pass


@dataclass(frozen=True)
class Confusion:
    """Binary confusion counts."""

    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise MetricError(f"Confusion counts must be non-negative: {self}")

    @classmethod
    def from_pairs(cls, labels: Iterable[int], predictions: Iterable[int]) -> "Confusion":
        y = np.asarray(list(labels), dtype=int)
        p = np.asarray(list(predictions), dtype=int)
        if y.shape != p.shape:
            raise MetricError("Labels and predictions differ in length")
        return cls(
            tp=int(np.sum((y == 1) & (p == 1))),
            fp=int(np.sum((y == 0) & (p == 1))),
            tn=int(np.sum((y == 0) & (p == 0))),
            fn=int(np.sum((y == 1) & (p == 0))),
        )

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def is_degenerate(self) -> bool:
        """True when one of the two label classes is absent."""
        return (self.tp + self.fn == 0) or (self.tn + self.fp == 0)


def balanced_accuracy(c: Confusion) -> float:
    """Mean of true positive and true negative rates.

    With one label class absent this is the recall of the present class.

    Raises:
        MetricError: If the confusion is empty
    """
    positives = c.tp + c.fn
    negatives = c.tn + c.fp
    if positives == 0 and negatives == 0:
        raise MetricError("Balanced accuracy of an empty confusion is undefined")
    if positives == 0:
        return c.tn / negatives
    if negatives == 0:
        return c.tp / positives
    return (c.tp / positives + c.tn / negatives) / 2


@dataclass(frozen=True)
class GroupMetric:
    group: Tuple
    balanced_accuracy: Optional[float]
    n: int
    degenerate: bool


def _check_cells(cells: pd.DataFrame) -> None:
    missing = [c for c in KEY_COLUMNS + ["label", "prediction"] if c not in cells.columns]
    if missing:
        raise MetricError(f"Cell table lacks columns: {', '.join(missing)}")
    duplicated = cells.duplicated(subset=KEY_COLUMNS)
    if duplicated.any():
        first = cells.loc[duplicated, KEY_COLUMNS].iloc[0].tolist()
        raise IntegrityError(f"Duplicate prediction for key {tuple(first)}")


def scored_cells(cells: pd.DataFrame, strict: bool = False) -> pd.DataFrame:
    """Cells that count towards accuracy, with a ``correct`` column.

    ``prediction`` is NaN for an abstention. Abstentions are dropped, or in
    strict mode kept with the wrong class as their prediction.
    """
    _check_cells(cells)
    scored = cells.copy()
    abstained = scored["prediction"].isna()
    if strict:
        scored.loc[abstained, "prediction"] = 1 - scored.loc[abstained, "label"]
    else:
        scored = scored.loc[~abstained]
    scored["prediction"] = scored["prediction"].astype(int)
    scored["label"] = scored["label"].astype(int)
    scored["correct"] = scored["prediction"] == scored["label"]
    return scored


def correctness_matrix(
    cells: pd.DataFrame, strict: bool = False
) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """Per-cell correctness and per-slice correct counts.

    Returns:
        Tuple of (scored cells, per-slice frame with columns visit_id,
        slice_index, correct, evaluated, abstained)

    Raises:
        IntegrityError: If a (slice, task, config) key is duplicated
    """
    scored = scored_cells(cells, strict)
    per_slice_columns = ["visit_id", "slice_index", "correct", "evaluated", "abstained"]
    if cells.empty:
        return scored, pd.DataFrame(columns=per_slice_columns)

    keys = ["visit_id", "slice_index"]
    abstained = (
        cells.assign(abstained=cells["prediction"].isna())
        .groupby(keys)["abstained"].sum()
        .astype(int)
    )
    evaluated = scored.groupby(keys)["correct"].agg(["sum", "size"])
    per_slice = (
        pd.DataFrame({"abstained": abstained})
        .join(evaluated.rename(columns={"sum": "correct", "size": "evaluated"}))
        .fillna(0)
        .reset_index()
    )
    per_slice[["correct", "evaluated", "abstained"]] = per_slice[
        ["correct", "evaluated", "abstained"]
    ].astype(int)
    return scored, per_slice[per_slice_columns].sort_values(keys).reset_index(drop=True)


def _group_metric(frame: pd.DataFrame) -> Tuple[Optional[float], int, bool]:
    confusion = Confusion.from_pairs(frame["label"], frame["prediction"])
    if confusion.n == 0:
        return None, 0, True
    return balanced_accuracy(confusion), confusion.n, confusion.is_degenerate


def group_balanced_accuracy(
    cells: pd.DataFrame, grouping: str, strict: bool = False
) -> pd.DataFrame:
    """Balanced accuracy per group.

    Args:
        cells: Cell table (one row per slice, task and configuration)
        grouping: One of the keys of ``GROUPINGS``
        strict: Count abstentions as incorrect

    Returns:
        Frame with the grouping columns plus balanced_accuracy, n and degenerate
    """
    if grouping not in GROUPINGS:
        raise MetricError(
            f"Unknown grouping '{grouping}'. Choose from: {', '.join(GROUPINGS)}"
        )
    columns = GROUPINGS[grouping]
    missing = [c for c in columns if c not in cells.columns]
    if missing:
        raise MetricError(f"Grouping '{grouping}' needs columns: {', '.join(missing)}")

    scored = scored_cells(cells, strict)
    rows = []
    for key, frame in scored.groupby(columns, sort=True):
        key = key if isinstance(key, tuple) else (key,)
        ba, n, degenerate = _group_metric(frame)
        rows.append(dict(zip(columns, key), balanced_accuracy=ba, n=n, degenerate=degenerate))
    return pd.DataFrame(rows, columns=columns + ["balanced_accuracy", "n", "degenerate"])


def summarize_across_configs(table: pd.DataFrame, by: Sequence[str]) -> pd.DataFrame:
    """Mean and population sd of balanced accuracy over configurations.

    ``table`` is a per-configuration group table; rows sharing ``by`` are
    aggregated. ``degenerate`` is set when any contributing cell is.
    """
    by = list(by)
    defined = table.dropna(subset=["balanced_accuracy"])
    summary = defined.groupby(by, sort=True).agg(
        mean=("balanced_accuracy", "mean"),
        sd=("balanced_accuracy", lambda s: float(np.std(s, ddof=0))),
        n_configs=("balanced_accuracy", "size"),
        degenerate=("degenerate", "any"),
    )
    return summary.reset_index()


@dataclass(frozen=True)
class ParityResult:
    """Demographic parity ratio of two groups under the four-fifths rule."""

    dpr: Optional[float]
    flagged: bool
    reason: Optional[str] = None

    @property
    def defined(self) -> bool:
        return self.dpr is not None


def demographic_parity_ratio(a: GroupMetric, b: GroupMetric) -> ParityResult:
    """min/max of two groups' balanced accuracies; flagged below 0.8."""
    for metric in (a, b):
        if metric.n == 0 or metric.balanced_accuracy is None:
            return ParityResult(None, False, f"group {metric.group} is empty")
        if metric.degenerate:
            return ParityResult(None, False, f"group {metric.group} has one label class only")

    high = max(a.balanced_accuracy, b.balanced_accuracy)
    if high == 0:
        return ParityResult(None, False, "both groups have zero balanced accuracy")
    dpr = min(a.balanced_accuracy, b.balanced_accuracy) / high
    return ParityResult(dpr, dpr < FOUR_FIFTHS - 1e-12)


def parity_table(
    cells: pd.DataFrame, groups: Tuple[str, str] = ("white", "non_white"), strict: bool = False
) -> pd.DataFrame:
    """Demographic parity ratio per (signal_id, config_id) between two race groups.

    Every pair present in ``cells`` gets a row. A pair whose predictions all
    abstained has an undefined ratio with a note saying so.
    """
    table = group_balanced_accuracy(cells, "task_config_race", strict)
    by_pair = {key: frame for key, frame in table.groupby(["signal_id", "config_id"], sort=True)}
    pairs = sorted(set(zip(cells["signal_id"], cells["config_id"])))
    rows = []
    for signal_id, config_id in pairs:
        frame = by_pair.get((signal_id, config_id))
        if frame is None:
            rows.append(
                {
                    "signal_id": signal_id,
                    "config_id": config_id,
                    f"ba_{groups[0]}": None,
                    f"ba_{groups[1]}": None,
                    "dpr": None,
                    "flagged": False,
                    "note": "all predictions abstained",
                }
            )
            continue
        metrics = {}
        for race in groups:
            match = frame[frame["race"] == race]
            if match.empty:
                metrics[race] = GroupMetric((race,), None, 0, True)
            else:
                row = match.iloc[0]
                metrics[race] = GroupMetric(
                    (race,), row["balanced_accuracy"], int(row["n"]), bool(row["degenerate"])
                )
        result = demographic_parity_ratio(metrics[groups[0]], metrics[groups[1]])
        rows.append(
            {
                "signal_id": signal_id,
                "config_id": config_id,
                f"ba_{groups[0]}": metrics[groups[0]].balanced_accuracy,
                f"ba_{groups[1]}": metrics[groups[1]].balanced_accuracy,
                "dpr": result.dpr,
                "flagged": result.flagged,
                "note": result.reason or "",
            }
        )
    return pd.DataFrame(
        rows,
        columns=["signal_id", "config_id", f"ba_{groups[0]}", f"ba_{groups[1]}", "dpr", "flagged", "note"],
    )


def label_prevalence(labels: pd.DataFrame) -> pd.DataFrame:
    """Share of positive labels per task.

    ``labels`` has one row per (visit_id, slice_index, signal_id) with a
    binary ``label`` column; repeated rows are collapsed first.
    """
    unique = labels.drop_duplicates(subset=["visit_id", "slice_index", "signal_id"])
    return (
        unique.groupby("signal_id", sort=True)["label"]
        .agg(prevalence="mean", n="size")
        .reset_index()
    )
