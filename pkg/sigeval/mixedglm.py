"""Binomial mixed models with crossed random intercepts.

Fits are Laplace-approximate maximum likelihood. For fixed variance
parameters, a penalized Newton solve finds the fixed coefficients and the
spherical random effects ``v`` (``u = sigma * v``) jointly. An outer
optimizer then works over the log variances.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import linalg, optimize, sparse
from scipy.special import expit

LOGGER = logging.getLogger(__name__)

SEPARATION_LIMIT = 25.0
LOG_VAR_BOUNDS = (float(np.log(1e-8)), float(np.log(100.0)))
START_VARIANCE = 0.25


class GlmmError(Exception):
    """Exception raised for model specification and fitting errors."""

    pass


class SeparationError(GlmmError):
    """Raised when a coefficient diverges because a column separates the outcome."""

    pass


def _bernoulli_loglik(eta: np.ndarray, y: np.ndarray, weights: np.ndarray) -> float:
    return float(np.sum(weights * (y * eta - np.logaddexp(0.0, eta))))


def logistic_irls(
    X: np.ndarray,
    y: Sequence[float],
    weights: Optional[Sequence[float]] = None,
    max_iter: int = 100,
    tol: float = 1e-8,
    column_names: Optional[Sequence[str]] = None,
) -> np.ndarray:
    """Maximum-likelihood logistic regression by iteratively reweighted least squares.

    Args:
        X: n x p design matrix
        y: n binary outcomes
        weights: Optional observation weights
        max_iter: Iteration cap
        tol: Convergence threshold on the largest coefficient step
        column_names: Names used in error messages

    Returns:
        Coefficient vector of length p

    Raises:
        SeparationError: If a coefficient diverges
        GlmmError: If the weighted cross-product is singular
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise GlmmError(f"Design of shape {X.shape} does not match {y.shape[0]} outcomes")
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=float)
    names = list(column_names) if column_names is not None else [f"x{j}" for j in range(X.shape[1])]

    beta = np.zeros(X.shape[1])
    for iteration in range(1, max_iter + 1):
        mu = expit(X @ beta)
        grad = X.T @ (w * (y - mu))
        hess = (X * (w * mu * (1 - mu))[:, None]).T @ X
        try:
            step = linalg.solve(hess, grad, assume_a="sym")
        except linalg.LinAlgError:
            raise GlmmError("Singular design: columns are collinear or a level is empty")
        beta = beta + step

        worst = int(np.argmax(np.abs(beta)))
        if abs(beta[worst]) > SEPARATION_LIMIT:
            raise SeparationError(
                f"Coefficient for '{names[worst]}' diverges: the column separates the outcome"
            )
        if np.max(np.abs(step)) < tol:
            LOGGER.debug("IRLS converged after %d iterations", iteration)
            return beta

    LOGGER.warning("IRLS stopped after %d iterations without converging", max_iter)
    return beta


@dataclass(frozen=True)
class GlmmSpec:
    """A logistic mixed model over a correctness cell table.

    ``reference`` names the baseline level of the fixed factor (treatment
    coding with intercept); ``None`` selects cell-means coding.
    ``fixed_variances`` pins named random factors to a variance; a value of
    0 removes the factor from the model.
    """

    fixed_factor: str
    random_factors: Tuple[str, ...]
    reference: Optional[str] = None
    outcome: str = "correct"
    levels: Optional[Tuple[str, ...]] = None
    max_iter: int = 200
    tol: float = 1e-8
    variance_floor: float = 1e-8
    fixed_variances: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.fixed_factor in self.random_factors:
            raise GlmmError(f"'{self.fixed_factor}' cannot be both fixed and random")
        if len(set(self.random_factors)) != len(self.random_factors):
            raise GlmmError("Random factors must be distinct")
        unknown = set(self.fixed_variances) - set(self.random_factors)
        if unknown:
            raise GlmmError(f"Pinned variances for undeclared factors: {', '.join(sorted(unknown))}")
        if any(v < 0 for v in self.fixed_variances.values()):
            raise GlmmError("Pinned variances must be non-negative")


@dataclass
class GlmmFit:
    """Estimates of a fitted mixed model."""

    spec: GlmmSpec
    fixed_coefs: Dict[str, float]
    random_variances: Dict[str, float]
    random_effects: Dict[str, Dict[str, float]]
    converged: bool
    iterations: int
    log_likelihood: float
    n_obs: int

    @property
    def odds_ratios(self) -> Dict[str, float]:
        return {level: float(np.exp(coef)) for level, coef in self.fixed_coefs.items()}

    @property
    def reference(self) -> Optional[str]:
        return self.spec.reference


class BinomialGlmm:
    """Laplace-approximate ML fitter for one :class:`GlmmSpec` on one data frame."""

    def __init__(self, data: pd.DataFrame, spec: GlmmSpec):
        self.spec = spec
        columns = [spec.outcome, spec.fixed_factor, *spec.random_factors]
        missing = [c for c in columns if c not in data.columns]
        if missing:
            raise GlmmError(f"Data lacks columns: {', '.join(missing)}")
        if data[columns].isna().any().any():
            raise GlmmError("Every observation needs an outcome and a level for each factor")
        if data.empty:
            raise GlmmError("Cannot fit a model to no observations")

        self.y = data[spec.outcome].astype(float).to_numpy()
        self.weights = np.ones_like(self.y)
        self.levels, self.X = self._fixed_design(data[spec.fixed_factor].astype(str))

        self.factors: List[str] = []
        self.factor_levels: Dict[str, List[str]] = {}
        self.pinned: Dict[str, float] = {}
        blocks = []
        for factor in spec.random_factors:
            pinned = spec.fixed_variances.get(factor)
            if pinned == 0:
                continue
            codes = pd.Categorical(data[factor].astype(str))
            self.factors.append(factor)
            self.factor_levels[factor] = list(codes.categories)
            if pinned is not None:
                self.pinned[factor] = pinned
            blocks.append(
                sparse.csc_matrix(
                    (np.ones(len(codes)), (np.arange(len(codes)), codes.codes)),
                    shape=(len(codes), len(codes.categories)),
                )
            )
        self.Z = sparse.hstack(blocks).tocsc() if blocks else sparse.csc_matrix((len(self.y), 0))
        self.block_sizes = [len(self.factor_levels[f]) for f in self.factors]
        self.free = [f for f in self.factors if f not in self.pinned]

        self._beta = np.zeros(self.X.shape[1])
        self._u = np.zeros(self.Z.shape[1])
        self._iterations = 0

    def _fixed_design(self, values: pd.Series) -> Tuple[List[str], np.ndarray]:
        spec = self.spec
        observed = sorted(values.unique())
        levels = list(spec.levels) if spec.levels else observed
        absent = set(observed) - set(levels)
        if absent:
            raise GlmmError(f"Levels {sorted(absent)} of '{spec.fixed_factor}' are not declared")
        levels = [lvl for lvl in levels if lvl in observed]
        if len(levels) < 2:
            raise GlmmError(f"Fixed factor '{spec.fixed_factor}' needs at least 2 levels")

        counts = values.value_counts()
        thin = [lvl for lvl in levels if counts.get(lvl, 0) < 2]
        if thin:
            raise GlmmError(f"Levels {thin} of '{spec.fixed_factor}' have fewer than 2 observations")

        if spec.reference is not None:
            if spec.reference not in levels:
                raise GlmmError(
                    f"Reference level '{spec.reference}' not found in '{spec.fixed_factor}'"
                )
            levels = [spec.reference] + [lvl for lvl in levels if lvl != spec.reference]
            X = np.column_stack(
                [np.ones(len(values))] + [(values == lvl).to_numpy(float) for lvl in levels[1:]]
            )
        else:
            X = np.column_stack([(values == lvl).to_numpy(float) for lvl in levels])
        return levels, X

    def _column_sigmas(self, variances: Mapping[str, float]) -> np.ndarray:
        return np.repeat(
            [np.sqrt(variances[f]) for f in self.factors], self.block_sizes
        ).astype(float)

    def _penalized_fit(self, sigmas: np.ndarray) -> float:
        """Newton solve of the penalized likelihood; returns its Laplace log-likelihood."""
        p = self.X.shape[1]
        ZS = self.Z @ sparse.diags(sigmas) if sigmas.size else self.Z
        D = sparse.hstack([sparse.csc_matrix(self.X), ZS]).tocsc()
        v = np.divide(self._u, sigmas, where=sigmas > 0, out=np.zeros_like(self._u))
        theta = np.concatenate([self._beta, v])
        y, w = self.y, self.weights

        def objective(t: np.ndarray) -> float:
            return _bernoulli_loglik(D @ t, y, w) - 0.5 * float(t[p:] @ t[p:])

        current = objective(theta)
        for _ in range(self.spec.max_iter):
            mu = expit(D @ theta)
            grad = D.T @ (w * (y - mu))
            grad[p:] -= theta[p:]
            hess = (D.T @ sparse.diags(w * mu * (1 - mu)) @ D).toarray()
            hess[np.arange(p, hess.shape[0]), np.arange(p, hess.shape[0])] += 1.0
            try:
                step = linalg.solve(hess, grad, assume_a="pos")
            except linalg.LinAlgError:
                raise GlmmError("Singular penalized Hessian: the fixed design is collinear")

            scale = 1.0
            for _ in range(30):
                candidate = theta + scale * step
                value = objective(candidate)
                if value >= current - 1e-12 * max(1.0, abs(current)):
                    break
                scale /= 2
            else:
                break
            theta, current = candidate, value

            worst = int(np.argmax(np.abs(theta[:p])))
            if abs(theta[worst]) > SEPARATION_LIMIT:
                raise SeparationError(
                    f"Coefficient for {self.spec.fixed_factor}='{self.levels[worst]}' diverges: "
                    "the level separates the outcome"
                )
            if np.max(np.abs(scale * step)) < self.spec.tol:
                break

        self._beta = theta[:p]
        self._u = theta[p:] * sigmas
        if not sigmas.size:
            return current

        mu = expit(D @ theta)
        inner = (ZS.T @ sparse.diags(w * mu * (1 - mu)) @ ZS).toarray()
        inner[np.diag_indices_from(inner)] += 1.0
        _, logdet = np.linalg.slogdet(inner)
        return current - 0.5 * float(logdet)

    def _variances(self, log_vars: np.ndarray) -> Dict[str, float]:
        variances = dict(self.pinned)
        variances.update({f: float(np.exp(v)) for f, v in zip(self.free, log_vars)})
        return variances

    def _deviance(self, log_vars: np.ndarray) -> float:
        self._iterations += 1
        return -self._penalized_fit(self._column_sigmas(self._variances(np.atleast_1d(log_vars))))

    def fit(self) -> GlmmFit:
        """Maximize the Laplace-approximate marginal likelihood.

        Raises:
            SeparationError: If a fixed level separates the outcome
        """
        spec = self.spec
        converged = True
        start = np.log(START_VARIANCE)

        if not self.free:
            log_vars = np.zeros(0)
            self._deviance(log_vars)
        elif len(self.free) == 1:
            result = optimize.minimize_scalar(
                self._deviance,
                bounds=LOG_VAR_BOUNDS,
                method="bounded",
                options={"xatol": 1e-6, "maxiter": spec.max_iter},
            )
            converged = bool(result.success)
            log_vars = np.array([result.x])
        else:
            result = optimize.minimize(
                self._deviance,
                x0=np.full(len(self.free), start),
                method="L-BFGS-B",
                bounds=[LOG_VAR_BOUNDS] * len(self.free),
                options={"maxiter": spec.max_iter, "eps": 1e-5},
            )
            converged = bool(result.success)
            log_vars = np.asarray(result.x)

        # final solve at the optimum so stored effects match the reported variances
        log_likelihood = -self._deviance(log_vars)
        if not converged:
            LOGGER.warning(
                "GLMM for '%s' did not converge within %d iterations", spec.fixed_factor, spec.max_iter
            )

        variances = self._variances(log_vars)
        reported = {}
        for factor in spec.random_factors:
            value = variances.get(factor, 0.0)
            at_floor = factor in self.free and np.log(max(value, 1e-300)) - LOG_VAR_BOUNDS[0] < 1e-3
            reported[factor] = 0.0 if at_floor or value <= spec.variance_floor else value

        effects: Dict[str, Dict[str, float]] = {}
        offset = 0
        for factor, size in zip(self.factors, self.block_sizes):
            block = self._u[offset:offset + size]
            effects[factor] = dict(zip(self.factor_levels[factor], map(float, block)))
            offset += size

        return GlmmFit(
            spec=spec,
            fixed_coefs=dict(zip(self.levels, map(float, self._beta))),
            random_variances=reported,
            random_effects=effects,
            converged=converged,
            iterations=self._iterations,
            log_likelihood=float(log_likelihood),
            n_obs=len(self.y),
        )


def fit_binomial_glmm(data: pd.DataFrame, spec: GlmmSpec) -> GlmmFit:
    """Fit ``spec`` to a cell table (one row per observation)."""
    LOGGER.info(
        "Fitting GLMM %s ~ %s + random(%s) on %d observations",
        spec.outcome, spec.fixed_factor, ", ".join(spec.random_factors), len(data),
    )
    return BinomialGlmm(data, spec).fit()


def odds_ratio_table(fit: GlmmFit, sort: str = "none") -> pd.DataFrame:
    """Coefficients, odds ratios and |1 - OR| per fixed level.

    ``band`` marks levels below even odds (OR < 1) as harder and the rest as
    easier. ``sort="ascending_or"`` orders rows by odds ratio.
    """
    if sort not in ("none", "ascending_or"):
        raise GlmmError(f"Unknown sort '{sort}'")
    rows = []
    for level, coef in fit.fixed_coefs.items():
        odds_ratio = float(np.exp(coef))
        rows.append(
            {
                "level": level,
                "coef": coef,
                "odds_ratio": odds_ratio,
                "abs_1_minus_or": abs(1.0 - odds_ratio),
                "is_reference": level == fit.reference,
                "band": "harder" if odds_ratio < 1 else "easier",
            }
        )
    table = pd.DataFrame(rows)
    if sort == "ascending_or":
        table = table.sort_values("odds_ratio", kind="mergesort").reset_index(drop=True)
    return table


# Named analyses over the cell table built by sigeval.analysis.
GLMM_ANALYSES: Dict[str, GlmmSpec] = {
    "model": GlmmSpec("model", ("visit_id", "prompt", "signal_id"), reference="FLAN"),
    "prompt": GlmmSpec("prompt", ("visit_id", "signal_id", "model"), reference="ZS"),
    "config": GlmmSpec("config_id", ("visit_id", "signal_id"), reference="FLAN-ZS"),
    "task": GlmmSpec("signal_id", ("visit_id", "config_id"), reference=None),
}
