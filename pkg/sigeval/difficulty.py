"""Hard/easy slice splits and lexicon feature comparisons."""

import logging
import math
import re
import string
from dataclasses import dataclass, field
from typing import Dict, Hashable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .stats import bonferroni, mann_whitney_u, stars

LOGGER = logging.getLogger(__name__)

TOKEN_PATTERN = re.compile(r"[a-z]+(?:'[a-z]+)*")
SENTENCE_SPLIT = re.compile(r"[.!?]+")
PUNCTUATION = frozenset(string.punctuation)


class DifficultyError(Exception):
    """Exception raised for lexicon, feature and split errors."""

    pass


@dataclass
class Lexicon:
    """Word categories; a pattern ending in ``*`` matches any word with that stem."""

    categories: Dict[str, Tuple[str, ...]]
    _exact: Dict[str, frozenset] = field(init=False, repr=False)
    _stems: Dict[str, Tuple[str, ...]] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if not self.categories:
            raise DifficultyError("Lexicon has no categories")
        self._exact, self._stems = {}, {}
        for name, patterns in self.categories.items():
            if not patterns:
                raise DifficultyError(f"Lexicon category '{name}' is empty")
            for pattern in patterns:
                if pattern != pattern.lower():
                    raise DifficultyError(f"Pattern '{pattern}' in '{name}' is not lowercase")
            self._exact[name] = frozenset(p for p in patterns if not p.endswith("*"))
            self._stems[name] = tuple(p[:-1] for p in patterns if p.endswith("*"))

    def matches(self, token: str) -> List[str]:
        """Categories that ``token`` belongs to."""
        return [
            name
            for name in self.categories
            if token in self._exact[name] or any(token.startswith(s) for s in self._stems[name])
        ]

    @classmethod
    def from_csv(cls, path: str) -> "Lexicon":
        """Read a ``category,pattern`` CSV, one pattern per row."""
        try:
            frame = pd.read_csv(path, dtype=str, keep_default_na=False)
        except FileNotFoundError:
            raise DifficultyError(f"Lexicon file '{path}' not found")
        missing = {"category", "pattern"} - set(frame.columns)
        if missing:
            raise DifficultyError(f"Lexicon file '{path}' lacks columns: {', '.join(sorted(missing))}")

        categories: Dict[str, List[str]] = {}
        for row in frame.itertuples(index=False):
            pattern = row.pattern.strip().lower()
            if pattern:
                categories.setdefault(row.category.strip(), []).append(pattern)
        return cls({name: tuple(patterns) for name, patterns in categories.items()})

    @classmethod
    def from_dic(cls, path: str) -> "Lexicon":
        """Read a dictionary-format file.

        The header between the first two ``%`` lines maps category numbers to
        names; every following line is a pattern and its category numbers,
        tab or space separated.
        """
        try:
            with open(path, "r", encoding="utf-8-sig") as f:
                lines = [line.strip() for line in f if line.strip()]
        except FileNotFoundError:
            raise DifficultyError(f"Lexicon file '{path}' not found")

        markers = [i for i, line in enumerate(lines) if line == "%"]
        if len(markers) < 2:
            raise DifficultyError(f"'{path}' lacks the % delimited category header")

        ids: Dict[str, str] = {}
        for line in lines[markers[0] + 1:markers[1]]:
            parts = line.split()
            if len(parts) < 2:
                raise DifficultyError(f"Bad category header line in '{path}': {line}")
            ids[parts[0]] = parts[1]

        categories: Dict[str, List[str]] = {}
        for line in lines[markers[1] + 1:]:
            parts = re.split(r"\s+", line)
            pattern = parts[0].lower()
            for category_id in parts[1:]:
                if category_id not in ids:
                    raise DifficultyError(f"Unknown category id {category_id} for '{pattern}' in '{path}'")
                categories.setdefault(ids[category_id], []).append(pattern)
        return cls({name: tuple(patterns) for name, patterns in categories.items()})


@dataclass(frozen=True)
class FeatureVector:
    """Lexicon percentages and surface statistics for one text."""

    categories: Dict[str, float]
    words_per_sentence: float
    all_punctuation: float
    periods: float
    tokens: int

    def as_dict(self) -> Dict[str, float]:
        values = {"WPS": self.words_per_sentence, "AllPunc": self.all_punctuation, "Period": self.periods}
        values.update(self.categories)
        return values


def extract_features(text: str, lexicon: Optional[Lexicon] = None) -> FeatureVector:
    """Category shares and surface statistics of ``text``.

    Tokens are lowercased alphabetic runs with internal apostrophes. A
    category's value is the percentage of tokens it matches; punctuation
    values are marks per 100 tokens, capped at 100.

    Raises:
        DifficultyError: If the text contains no tokens
    """
    tokens = TOKEN_PATTERN.findall(text.lower())
    if not tokens:
        raise DifficultyError("Cannot extract features from text without words")
    n = len(tokens)

    counts: Dict[str, int] = {}
    if lexicon is not None:
        counts = {name: 0 for name in lexicon.categories}
        for token in tokens:
            for name in lexicon.matches(token):
                counts[name] += 1

    sentences = sum(1 for part in SENTENCE_SPLIT.split(text.lower()) if TOKEN_PATTERN.search(part))
    punctuation = sum(1 for ch in text if ch in PUNCTUATION)

    return FeatureVector(
        categories={name: 100.0 * c / n for name, c in counts.items()},
        words_per_sentence=n / max(1, sentences),
        all_punctuation=min(100.0, 100.0 * punctuation / n),
        periods=min(100.0, 100.0 * text.count(".") / n),
        tokens=n,
    )


def feature_table(texts: Mapping[Hashable, str], lexicon: Optional[Lexicon] = None) -> pd.DataFrame:
    """One row of features per text key; texts without words are skipped."""
    rows = {}
    for key, text in texts.items():
        try:
            rows[key] = extract_features(text, lexicon).as_dict()
        except DifficultyError:
            LOGGER.warning("Skipping %s: no words to analyse", key)
    return pd.DataFrame.from_dict(rows, orient="index")


@dataclass(frozen=True)
class QuantileSplit:
    hard: Tuple[Hashable, ...]
    easy: Tuple[Hashable, ...]
    low_cut: float
    high_cut: float
    q: float


def split_quantiles(counts: Mapping[Hashable, float], q: float = 0.25) -> QuantileSplit:
    """Split slices by correct-prediction count using nearest-rank quantiles.

    Hard slices have a count at or below the ``q`` quantile; easy slices at
    or above the ``1 - q`` quantile.

    Raises:
        DifficultyError: If q is outside (0, 0.5) or the two sets would overlap or be empty
    """
    if not 0 < q < 0.5:
        raise DifficultyError(f"Quantile must lie in (0, 0.5), got {q}")
    n = len(counts)
    k = math.ceil(q * n - 1e-9)
    if n < 2 or k < 1:
        raise DifficultyError(f"Too few slices ({n}) for a {q} quantile split")

    ordered = sorted(counts.values())
    low_cut, high_cut = ordered[k - 1], ordered[n - k]
    if low_cut >= high_cut:
        raise DifficultyError(
            f"Quantile cut-offs coincide ({low_cut} >= {high_cut}); hard and easy sets would overlap"
        )
    hard = tuple(key for key, c in counts.items() if c <= low_cut)
    easy = tuple(key for key, c in counts.items() if c >= high_cut)
    return QuantileSplit(hard, easy, float(low_cut), float(high_cut), q)


def compare_groups(
    features: pd.DataFrame, hard: Sequence[Hashable], easy: Sequence[Hashable]
) -> pd.DataFrame:
    """Per feature: mean and sd per group, Mann-Whitney U, Bonferroni-corrected p.

    Args:
        features: One row per slice key, one column per feature
        hard: Keys of the hard group
        easy: Keys of the easy group

    Returns:
        Frame with columns feature, hard_mean, hard_sd, easy_mean, easy_sd,
        u_statistic, p_value, corrected_p, stars, method
    """
    hard_rows = features.loc[[k for k in hard if k in features.index]]
    easy_rows = features.loc[[k for k in easy if k in features.index]]
    if hard_rows.empty or easy_rows.empty:
        raise DifficultyError("Both groups need at least one slice with features")

    rows = []
    for column in features.columns:
        x = hard_rows[column].to_numpy(float)
        y = easy_rows[column].to_numpy(float)
        if np.unique(np.concatenate([x, y])).size == 1:
            u, p_value, method = len(x) * len(y) / 2, 1.0, "constant feature"
        else:
            result = mann_whitney_u(x, y, mode="auto")
            u, p_value, method = result.statistic, result.p_value, result.method
        rows.append(
            {
                "feature": column,
                "hard_mean": float(np.mean(x)),
                "hard_sd": float(np.std(x, ddof=1)) if len(x) > 1 else 0.0,
                "easy_mean": float(np.mean(y)),
                "easy_sd": float(np.std(y, ddof=1)) if len(y) > 1 else 0.0,
                "u_statistic": float(u),
                "p_value": p_value,
                "method": method,
            }
        )

    table = pd.DataFrame(rows)
    table["corrected_p"] = bonferroni(table["p_value"].tolist(), len(table))
    table["stars"] = [stars(p) for p in table["corrected_p"]]
    return table[
        ["feature", "hard_mean", "hard_sd", "easy_mean", "easy_sd",
         "u_statistic", "p_value", "corrected_p", "stars", "method"]
    ]


def load_lexicon(path: str) -> Lexicon:
    """Read a lexicon, choosing the dictionary format for ``.dic`` files and CSV otherwise."""
    if path.lower().endswith(".dic"):
        return Lexicon.from_dic(path)
    return Lexicon.from_csv(path)
