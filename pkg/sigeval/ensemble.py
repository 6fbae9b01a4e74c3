"""Penalized logistic ensembles over configuration outputs, evaluated leave-one-provider-group-out."""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import expit
from sklearn.model_selection import LeaveOneGroupOut

from .corpus import VisitMetadata
from .metrics import Confusion, balanced_accuracy
from .mixedglm import GlmmError, logistic_irls

LOGGER = logging.getLogger(__name__)

ABSTAIN_FEATURE = 0.5
PENALTIES = ("l1", "l2")

SliceKey = Tuple[str, int]


class EnsembleError(Exception):
    """Exception raised for ensemble fitting and fold construction errors."""

    pass


@dataclass(frozen=True)
class LogisticWeights:
    """Fitted intercept and per-feature weights."""

    intercept: float
    weights: np.ndarray
    lam: float
    penalty: str
    sweeps: int = 0
    converged: bool = True

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return expit(self.intercept + np.asarray(X, dtype=float) @ self.weights)

    def predict(self, X: np.ndarray, threshold: float = 0.5) -> np.ndarray:
        return (self.predict_proba(X) >= threshold).astype(int)

    @property
    def nonzero(self) -> np.ndarray:
        return np.flatnonzero(self.weights)


def _soft_threshold(z: float, gamma: float) -> float:
    if z > gamma:
        return z - gamma
    if z < -gamma:
        return z + gamma
    return 0.0


def l1_logistic_fit(
    X: np.ndarray,
    y: Sequence[int],
    lam: float,
    penalty: str = "l1",
    max_sweeps: int = 10000,
    tol: float = 1e-7,
) -> LogisticWeights:
    """Penalized logistic regression by cyclic coordinate descent.

    Minimizes mean log-loss plus ``lam * sum|w|`` (``l1``) or
    ``lam / 2 * sum w^2`` (``l2``); the intercept is not penalized. Each
    coordinate takes a proximal Newton step with backtracking. With
    ``lam == 0`` the unpenalized fit is delegated to IRLS.

    Raises:
        EnsembleError: If only one class is present or options are invalid
        SeparationError: If ``lam == 0`` and a feature separates the labels
    """
    if penalty not in PENALTIES:
        raise EnsembleError(f"Unknown penalty '{penalty}'. Choose from: {', '.join(PENALTIES)}")
    if lam < 0:
        raise EnsembleError(f"Penalty strength must be non-negative, got {lam}")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or X.shape[0] != y.shape[0] or X.shape[0] == 0:
        raise EnsembleError(f"Features of shape {X.shape} do not match {y.shape[0]} labels")
    if np.unique(y).size < 2:
        raise EnsembleError("Cannot fit a logistic model to a single class")

    n, p = X.shape
    if lam == 0:
        coef = logistic_irls(
            np.column_stack([np.ones(n), X]),
            y,
            column_names=["intercept"] + [f"feature {j}" for j in range(p)],
        )
        return LogisticWeights(float(coef[0]), coef[1:], lam, penalty)

    def objective(b: float, w: np.ndarray, eta: np.ndarray) -> float:
        loss = float(np.mean(np.logaddexp(0.0, eta) - y * eta))
        if penalty == "l1":
            return loss + lam * float(np.sum(np.abs(w)))
        return loss + 0.5 * lam * float(w @ w)

    b, w = 0.0, np.zeros(p)
    eta = np.zeros(n)
    current = objective(b, w, eta)

    for sweep in range(1, max_sweeps + 1):
        largest = 0.0
        for j in range(-1, p):
            x = np.ones(n) if j < 0 else X[:, j]
            mu = expit(eta)
            h = float(np.mean(mu * (1 - mu) * x * x))
            if h <= 0:
                continue
            g = float(np.mean((mu - y) * x))
            old = b if j < 0 else w[j]
            if j < 0:
                target = old - g / h
            elif penalty == "l1":
                target = _soft_threshold(old - g / h, lam / h)
            else:
                target = old - (g + lam * old) / (h + lam)
            delta = target - old
            if delta == 0:
                continue

            scale = 1.0
            for _ in range(30):
                step = scale * delta
                trial_w = w.copy()
                trial_b = b
                if j < 0:
                    trial_b = b + step
                else:
                    trial_w[j] = w[j] + step
                trial_eta = eta + step * x
                value = objective(trial_b, trial_w, trial_eta)
                if value <= current + 1e-15:
                    break
                scale /= 2
            else:
                continue
            b, w, eta, current = trial_b, trial_w, trial_eta, value
            largest = max(largest, abs(step))

        if largest < tol:
            return LogisticWeights(b, w, lam, penalty, sweep, True)

    LOGGER.warning("Coordinate descent stopped after %d sweeps without converging", max_sweeps)
    return LogisticWeights(b, w, lam, penalty, max_sweeps, False)


@dataclass(frozen=True)
class EnsembleFold:
    held_out_group: str
    train_keys: Tuple[SliceKey, ...]
    test_keys: Tuple[SliceKey, ...]


def logo_folds(
    metadata: Mapping[str, VisitMetadata], slice_keys: Sequence[SliceKey]
) -> List[EnsembleFold]:
    """One fold per provider group; each fold holds out every slice of that group.

    Raises:
        EnsembleError: If a visit has no provider group or fewer than two groups exist
    """
    keys = sorted(set(slice_keys))
    groups = []
    for visit_id, _ in keys:
        meta = metadata.get(visit_id)
        if meta is None or not meta.provider_group:
            raise EnsembleError(f"Visit '{visit_id}' has no provider group assignment")
        groups.append(meta.provider_group)
    if len(set(groups)) < 2:
        raise EnsembleError(
            f"Leave-one-group-out needs at least 2 provider groups, found {len(set(groups))}"
        )

    groups_arr = np.asarray(groups)
    folds = []
    for train_idx, test_idx in LeaveOneGroupOut().split(np.zeros(len(keys)), groups=groups_arr):
        folds.append(
            EnsembleFold(
                held_out_group=str(groups_arr[test_idx[0]]),
                train_keys=tuple(keys[i] for i in train_idx),
                test_keys=tuple(keys[i] for i in test_idx),
            )
        )
    return folds


@dataclass
class TaskEnsemble:
    """Leave-one-group-out result for one task."""

    signal_id: str
    fold_scores: Dict[str, float] = field(default_factory=dict)
    skipped_folds: Dict[str, str] = field(default_factory=dict)
    fold_models: Dict[str, Optional[LogisticWeights]] = field(default_factory=dict)
    config_ids: Tuple[str, ...] = ()

    @property
    def mean_ba(self) -> Optional[float]:
        if not self.fold_scores:
            return None
        return float(np.mean(list(self.fold_scores.values())))

    @property
    def sd_ba(self) -> Optional[float]:
        if not self.fold_scores:
            return None
        return float(np.std(list(self.fold_scores.values()), ddof=0))

    @property
    def nonzero_counts(self) -> Dict[str, int]:
        """Number of folds in which each configuration got a nonzero weight."""
        counts = {config_id: 0 for config_id in self.config_ids}
        for model in self.fold_models.values():
            if model is None:
                continue
            for j in model.nonzero:
                counts[self.config_ids[j]] += 1
        return counts


def feature_matrix(
    cells: pd.DataFrame, signal_id: str, config_ids: Sequence[str]
) -> Tuple[pd.DataFrame, pd.Series]:
    """Binary configuration outputs per slice for one task, abstentions as 0.5."""
    task_cells = cells[cells["signal_id"] == signal_id]
    features = (
        task_cells.set_index(["visit_id", "slice_index", "config_id"])["prediction"]
        .astype(float)
        .unstack("config_id")
        .reindex(columns=list(config_ids))
    )
    features = features.fillna(ABSTAIN_FEATURE).sort_index()
    labels = (
        task_cells.groupby(["visit_id", "slice_index"])["label"].first().reindex(features.index)
    )
    return features, labels.astype(int)


def ensemble_evaluate(
    cells: pd.DataFrame,
    metadata: Mapping[str, VisitMetadata],
    config_ids: Sequence[str],
    lam: float = 0.1,
    penalty: str = "l1",
    threshold: float = 0.5,
    signal_ids: Optional[Sequence[str]] = None,
) -> List[TaskEnsemble]:
    """Per-task leave-one-provider-group-out balanced accuracy of the ensemble.

    Args:
        cells: Cell table with label and prediction (NaN for abstain) columns
        metadata: Visit metadata carrying provider groups
        config_ids: Feature order, one column per configuration
        lam: Penalty strength
        penalty: ``l1`` or ``l2``
        threshold: Probability cut-off for a positive prediction
        signal_ids: Tasks to evaluate (default: every task in ``cells``)

    Returns:
        One TaskEnsemble per task, in the order given
    """
    if cells.empty:
        return []
    all_keys = list(
        cells[["visit_id", "slice_index"]].drop_duplicates().itertuples(index=False, name=None)
    )
    folds = logo_folds(metadata, all_keys)
    if signal_ids is None:
        signal_ids = sorted(cells["signal_id"].unique())

    results = []
    for signal_id in signal_ids:
        features, labels = feature_matrix(cells, signal_id, config_ids)
        result = TaskEnsemble(signal_id, config_ids=tuple(config_ids))
        present = set(features.index)
        for fold in folds:
            test = [k for k in fold.test_keys if k in present]
            train = [k for k in fold.train_keys if k in present]
            group = fold.held_out_group
            if not test:
                result.skipped_folds[group] = "no test labels"
                continue
            if not train:
                result.skipped_folds[group] = "no training labels"
                continue

            y_train = labels.loc[train].to_numpy()
            X_test = features.loc[test].to_numpy()
            if np.unique(y_train).size < 2:
                model = None
                predicted = np.full(len(test), int(y_train[0]))
            else:
                try:
                    model = l1_logistic_fit(features.loc[train].to_numpy(), y_train, lam, penalty)
                except GlmmError as e:
                    result.skipped_folds[group] = str(e)
                    LOGGER.warning("Skipping fold %s for %s: %s", group, signal_id, e)
                    continue
                predicted = model.predict(X_test, threshold)

            result.fold_models[group] = model
            result.fold_scores[group] = balanced_accuracy(
                Confusion.from_pairs(labels.loc[test].to_numpy(), predicted)
            )
        for group, reason in result.skipped_folds.items():
            LOGGER.info("Fold %s skipped for %s: %s", group, signal_id, reason)
        results.append(result)
    return results
