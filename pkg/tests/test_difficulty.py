"""Tests for difficulty module."""

import os

import pandas as pd
import pytest

from sigeval.difficulty import (
    DifficultyError,
    Lexicon,
    compare_groups,
    extract_features,
    feature_table,
    load_lexicon,
    split_quantiles,
)


@pytest.fixture
def lexicon() -> Lexicon:
    return Lexicon({"polite": ("thank", "thanks", "please"), "cogproc": ("think*", "know")})


class TestLexicon:
    """Test cases for lexicon matching and loading."""

    def test_stem_pattern(self, lexicon):
        """Test a trailing asterisk matches every word with that stem."""
        assert lexicon.matches("thinking") == ["cogproc"]
        assert lexicon.matches("think") == ["cogproc"]
        assert lexicon.matches("thank") == ["polite"]
        assert lexicon.matches("thin") == []

    def test_empty_category(self):
        """Test a category without patterns is rejected."""
        with pytest.raises(DifficultyError, match="empty"):
            Lexicon({"polite": ()})

    def test_uppercase_pattern(self):
        """Test patterns must be lowercase."""
        with pytest.raises(DifficultyError, match="lowercase"):
            Lexicon({"polite": ("Please",)})

    def test_from_csv(self, temp_dir: str):
        """Test reading category and pattern rows."""
        path = os.path.join(temp_dir, "lexicon.csv")
        with open(path, "w") as f:
            f.write("category,pattern\nposemo,happy\nposemo,glad\ncogproc,think*\n")
        lexicon = load_lexicon(path)
        assert lexicon.categories == {"posemo": ("happy", "glad"), "cogproc": ("think*",)}

    def test_from_dic(self, temp_dir: str):
        """Test reading the dictionary format with a numbered category header."""
        path = os.path.join(temp_dir, "lexicon.dic")
        with open(path, "w") as f:
            f.write("%\n1\tposemo\n2\tcogproc\n%\nhappy\t1\nthink*\t2\nglad 1 2\n")
        lexicon = load_lexicon(path)
        assert lexicon.categories == {"posemo": ("happy", "glad"), "cogproc": ("think*", "glad")}

    def test_dic_unknown_category(self, temp_dir: str):
        """Test a pattern pointing at an undeclared category id."""
        path = os.path.join(temp_dir, "lexicon.dic")
        with open(path, "w") as f:
            f.write("%\n1\tposemo\n%\nhappy\t3\n")
        with pytest.raises(DifficultyError, match="Unknown category id 3"):
            load_lexicon(path)

    def test_missing_file(self, temp_dir: str):
        """Test a lexicon path that does not exist."""
        with pytest.raises(DifficultyError, match="not found"):
            load_lexicon(os.path.join(temp_dir, "absent.csv"))


class TestExtractFeatures:
    """Test cases for per-text features."""

    def test_category_percentage(self, lexicon):
        """Test a category value is its share of tokens in percent."""
        text = "Thank you so much, please sit down and we can begin today"
        features = extract_features(text, lexicon)
        assert features.tokens == 12
        assert features.categories["polite"] == pytest.approx(100.0 * 2 / 12)

    def test_polite_share(self, lexicon):
        """Test two polite words in ten tokens."""
        text = "thanks for coming in today please have a seat now"
        assert extract_features(text, lexicon).categories["polite"] == pytest.approx(20.0)

    def test_words_per_sentence(self):
        """Test words per sentence over three sentences."""
        features = extract_features("I am here. You are there. We go now.")
        assert features.words_per_sentence == pytest.approx(3.0)
        assert features.periods == pytest.approx(100.0 * 3 / 9)
        assert features.categories == {}

    def test_punctuation_capped(self):
        """Test punctuation shares never exceed 100."""
        features = extract_features("Wow!!!!!")
        assert features.all_punctuation == 100.0

    def test_no_words(self):
        """Test text without words is rejected."""
        with pytest.raises(DifficultyError):
            extract_features("... !!")

    def test_feature_table_skips_empty(self, lexicon):
        """Test texts without words are left out of the table."""
        table = feature_table({("v1", 0): "I think so.", ("v1", 1): "..."}, lexicon)
        assert list(table.index) == [("v1", 0)]
        assert {"WPS", "AllPunc", "Period", "polite", "cogproc"} <= set(table.columns)


class TestSplitQuantiles:
    """Test cases for hard and easy splits."""

    def test_quartiles(self):
        """Test the quartile split of 1 to 100."""
        split = split_quantiles({i: float(i) for i in range(1, 101)})
        assert max(split.hard) == 25
        assert min(split.easy) == 76
        assert len(split.hard) == len(split.easy) == 25
        assert (split.low_cut, split.high_cut) == (25.0, 76.0)

    def test_ties_join_group(self):
        """Test slices tied at a cut-off fall into that group."""
        counts = {"a": 1, "b": 2, "c": 2, "d": 5, "e": 6, "f": 9, "g": 9, "h": 9}
        split = split_quantiles(counts)
        assert set(split.hard) == {"a", "b", "c"}
        assert set(split.easy) == {"f", "g", "h"}

    def test_overlap(self):
        """Test identical counts make the groups overlap."""
        with pytest.raises(DifficultyError, match="overlap"):
            split_quantiles({i: 3.0 for i in range(20)})

    @pytest.mark.parametrize("q", [0.0, 0.5, 0.7])
    def test_bad_quantile(self, q):
        """Test the quantile must lie strictly between 0 and 0.5."""
        with pytest.raises(DifficultyError):
            split_quantiles({i: float(i) for i in range(10)}, q=q)


class TestCompareGroups:
    """Test cases for hard versus easy feature comparisons."""

    def test_separated_feature(self):
        """Test a fully separated feature is significant after correction."""
        features = pd.DataFrame(
            {"WPS": [float(v) for v in range(1, 21)], "constant": [1.0] * 20},
            index=list(range(20)),
        )
        table = compare_groups(features, hard=range(10), easy=range(10, 20)).set_index("feature")
        assert table.loc["WPS", "u_statistic"] == 0
        assert table.loc["WPS", "corrected_p"] == pytest.approx(2 * table.loc["WPS", "p_value"])
        assert table.loc["WPS", "stars"] == "***"
        assert table.loc["WPS", "hard_mean"] == pytest.approx(5.5)
        assert table.loc["constant", "p_value"] == 1.0
        assert table.loc["constant", "stars"] == ""

    def test_empty_group(self):
        """Test a group without feature rows."""
        features = pd.DataFrame({"WPS": [1.0, 2.0]}, index=["a", "b"])
        with pytest.raises(DifficultyError):
            compare_groups(features, hard=["a"], easy=["z"])
