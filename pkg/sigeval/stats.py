"""Hypothesis tests used by the analyses."""

import itertools
import math
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence

import numpy as np
from scipy import stats as sps


class StatsError(Exception):
    """Exception raised for invalid test inputs."""

    pass


@dataclass(frozen=True)
class TestResult:
    """Outcome of one hypothesis test."""

    __test__ = False

    statistic: float
    p_value: float
    method: str
    df: Optional[int] = None
    corrected_p: Optional[float] = None
    caveat: Optional[str] = None

    def corrected(self, m: int) -> "TestResult":
        """Copy with a Bonferroni-corrected p-value for ``m`` comparisons."""
        return replace(self, corrected_p=bonferroni([self.p_value], m)[0])


def stars(p_value: Optional[float]) -> str:
    """Significance marker: * below 0.05, ** below 0.01, *** below 0.001."""
    if p_value is None or math.isnan(p_value):
        return ""
    if p_value < 0.001:
        return "***"
    if p_value < 0.01:
        return "**"
    if p_value < 0.05:
        return "*"
    return ""


def _hypergeometric_mass(a: int, row1: int, row2: int, col1: int) -> float:
    n = row1 + row2
    return math.comb(row1, a) * math.comb(row2, col1 - a) / math.comb(n, col1)


def fisher_exact_2x2(table: Sequence[Sequence[int]]) -> TestResult:
    """Two-sided Fisher exact test on a 2x2 table.

    The p-value sums the hypergeometric masses of every table with the
    observed margins that is no more likely than the observed one. The
    statistic is the sample odds ratio ``ad / bc``.

    Raises:
        StatsError: If the table is not 2x2 non-negative integers or is empty
    """
    counts = np.asarray(table)
    if counts.shape != (2, 2):
        raise StatsError(f"Fisher exact test needs a 2x2 table, got shape {counts.shape}")
    if np.any(counts < 0) or not np.all(np.equal(np.mod(counts, 1), 0)):
        raise StatsError("Fisher exact test needs non-negative integer counts")

    a, b, c, d = (int(v) for v in counts.ravel())
    row1, row2, col1 = a + b, c + d, a + c
    if row1 + row2 == 0:
        raise StatsError("Fisher exact test on an empty table")

    observed = _hypergeometric_mass(a, row1, row2, col1)
    lo, hi = max(0, col1 - row2), min(row1, col1)
    p_value = sum(
        mass
        for mass in (_hypergeometric_mass(x, row1, row2, col1) for x in range(lo, hi + 1))
        if mass <= observed * (1 + 1e-12)
    )

    if b * c > 0:
        odds_ratio = (a * d) / (b * c)
    elif a * d > 0:
        odds_ratio = float("inf")
    else:
        odds_ratio = float("nan")

    return TestResult(
        statistic=odds_ratio,
        p_value=min(1.0, p_value),
        method="Fisher exact (two-sided)",
    )


def chi_squared_independence(table: Sequence[Sequence[float]]) -> TestResult:
    """Pearson chi-squared test of independence without continuity correction.

    Raises:
        StatsError: If the table is smaller than 2x2 or has a zero margin
    """
    counts = np.asarray(table, dtype=float)
    if counts.ndim != 2 or min(counts.shape) < 2:
        raise StatsError(f"Chi-squared test needs at least a 2x2 table, got shape {counts.shape}")
    if np.any(counts < 0):
        raise StatsError("Chi-squared test needs non-negative counts")
    if np.any(counts.sum(axis=0) == 0) or np.any(counts.sum(axis=1) == 0):
        raise StatsError("Chi-squared test undefined: a row or column total is zero")

    statistic, p_value, dof, _ = sps.chi2_contingency(counts, correction=False)
    return TestResult(
        statistic=float(statistic),
        p_value=float(p_value),
        method="Pearson chi-squared",
        df=int(dof),
    )


def _u_statistic(ranks: np.ndarray, n_x: int) -> float:
    return float(ranks[:n_x].sum() - n_x * (n_x + 1) / 2)


def _exact_u_p_value(ranks: np.ndarray, n_x: int, u_obs: float) -> float:
    n = len(ranks)
    mean = n_x * (n - n_x) / 2
    distance = abs(u_obs - mean) - 1e-9
    total = hits = 0
    for chosen in itertools.combinations(range(n), n_x):
        u = ranks[list(chosen)].sum() - n_x * (n_x + 1) / 2
        total += 1
        if abs(u - mean) >= distance:
            hits += 1
    return hits / total


EXACT_MAX_N = 12


def mann_whitney_u(x: Sequence[float], y: Sequence[float], mode: str = "auto") -> TestResult:
    """Two-sided Mann-Whitney U test; the statistic is U for ``x``.

    ``exact`` enumerates every assignment of the pooled midranks to the two
    groups. ``normal_approx`` (alias ``normal``) uses the tie-corrected normal
    approximation with a continuity correction. ``auto`` is exact for tie-free
    samples of at most twelve values in total.
    """
    if mode == "normal":
        mode = "normal_approx"
    if mode not in ("exact", "normal_approx", "auto"):
        raise StatsError(f"Unknown Mann-Whitney mode '{mode}'")
    x_arr = np.asarray(x, dtype=float)
    y_arr = np.asarray(y, dtype=float)
    if x_arr.size == 0 or y_arr.size == 0:
        raise StatsError("Mann-Whitney U test needs two non-empty samples")

    pooled = np.concatenate([x_arr, y_arr])
    ranks = sps.rankdata(pooled)
    n_x = x_arr.size
    u_x = _u_statistic(ranks, n_x)

    if mode == "auto":
        has_ties = np.unique(pooled).size < pooled.size
        mode = "exact" if pooled.size <= EXACT_MAX_N and not has_ties else "normal_approx"

    if mode == "exact":
        p_value = _exact_u_p_value(ranks, n_x, u_x)
        method = "Mann-Whitney U (exact)"
    else:
        if np.unique(pooled).size == 1:
            p_value = 1.0
        else:
            result = sps.mannwhitneyu(
                x_arr, y_arr, alternative="two-sided", method="asymptotic", use_continuity=True
            )
            p_value = float(result.pvalue)
        method = "Mann-Whitney U (normal approximation)"

    return TestResult(statistic=u_x, p_value=min(1.0, p_value), method=method)


def bonferroni(p_values: Sequence[float], m: Optional[int] = None) -> List[float]:
    """Bonferroni-adjusted p-values, ``min(1, p * m)``, in input order.

    Raises:
        StatsError: If ``m`` is smaller than the number of p-values
    """
    p_values = list(p_values)
    if m is None:
        m = len(p_values)
    if m < len(p_values):
        raise StatsError(f"Number of comparisons {m} is below the {len(p_values)} p-values given")
    return [min(1.0, p * m) for p in p_values]


def ks_normality(data: Sequence[float]) -> TestResult:
    """Kolmogorov-Smirnov distance to a normal with the sample mean and sd.

    The p-value comes from the asymptotic Kolmogorov distribution. Because
    the parameters are estimated from the same data it is conservative; the
    result carries that caveat.

    Raises:
        StatsError: With fewer than five points or zero variance
    """
    values = np.asarray(data, dtype=float)
    if values.size < 5:
        raise StatsError(f"Normality check needs at least 5 points, got {values.size}")
    sd = values.std(ddof=1)
    if sd == 0:
        raise StatsError("Normality check on a sample with zero variance")

    result = sps.kstest(values, "norm", args=(values.mean(), sd), method="asymp")
    return TestResult(
        statistic=float(result.statistic),
        p_value=float(result.pvalue),
        method="Kolmogorov-Smirnov (normal, estimated parameters)",
        caveat="parameters estimated from the sample (Lilliefors condition)",
    )
