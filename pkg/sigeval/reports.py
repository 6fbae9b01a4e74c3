"""Deterministic report files: CSV, markdown and a JSON summary."""

import hashlib
import json
import logging
import math
import os
from typing import Any, Iterable, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from .stats import stars

LOGGER = logging.getLogger(__name__)

FLOAT_FORMAT = "%.6f"
MISSING = "--"


def journal_hash(path: str) -> str:
    """sha256 hex digest of the sorted prediction file."""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(65536), b""):
            digest.update(block)
    return digest.hexdigest()


def format_mean_sd(mean: Optional[float], sd: Optional[float], digits: int = 3, sd_digits: int = 2) -> str:
    """``0.603 (0.13)``; ``--`` when the mean is undefined."""
    if mean is None or (isinstance(mean, float) and math.isnan(mean)):
        return MISSING
    if sd is None or (isinstance(sd, float) and math.isnan(sd)):
        return f"{mean:.{digits}f}"
    return f"{mean:.{digits}f} ({sd:.{sd_digits}f})"


def emphasize(value: Optional[float], text: str, high: float = 0.55, low: float = 0.5) -> str:
    """Bold above ``high``, underline below ``low``."""
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return text
    if value > high:
        return f"**{text}**"
    if value < low:
        return f"<u>{text}</u>"
    return text


def with_stars(text: str, p_value: Optional[float]) -> str:
    marker = stars(p_value)
    return f"{text} {marker}" if marker else text


def _cell(value: Any) -> str:
    if value is None:
        return MISSING
    if isinstance(value, (bool, np.bool_)):
        return "yes" if value else "no"
    if isinstance(value, (float, np.floating)):
        return MISSING if math.isnan(value) else f"{value:.3f}"
    return str(value).replace("|", "\\|")


def markdown_table(headers: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    """Pipe table; floats print with three decimals and None as ``--``."""
    lines = [
        "| " + " | ".join(str(h) for h in headers) + " |",
        "|" + "|".join("---" for _ in headers) + "|",
    ]
    for row in rows:
        lines.append("| " + " | ".join(_cell(v) for v in row) + " |")
    return "\n".join(lines) + "\n"


def frame_to_markdown(frame: pd.DataFrame) -> str:
    return markdown_table(list(frame.columns), frame.itertuples(index=False, name=None))


def _plain(value: Any) -> Any:
    if isinstance(value, Mapping):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return None if math.isnan(value) or math.isinf(value) else round(value, 6)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


class ReportWriter:
    """Writes report artifacts stamped with the journal hash they derive from."""

    def __init__(self, out_dir: str, journal_sha: str):
        self.out_dir = out_dir
        self.journal_sha = journal_sha
        self.written: List[str] = []
        os.makedirs(out_dir, exist_ok=True)

    def _path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    def write_csv(self, name: str, frame: pd.DataFrame) -> str:
        """``name.csv`` with a leading ``# journal_sha256=`` comment line."""
        path = self._path(f"{name}.csv")
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(f"# journal_sha256={self.journal_sha}\n")
            frame.to_csv(f, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        self.written.append(path)
        return path

    def write_markdown(self, name: str, body: str, title: Optional[str] = None) -> str:
        path = self._path(f"{name}.md")
        parts = []
        if title:
            parts.append(f"## {title}\n")
        parts.append(f"_Derived from prediction journal sha256 {self.journal_sha}_\n")
        parts.append(body)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write("\n".join(parts))
        self.written.append(path)
        return path

    def write_table(
        self,
        name: str,
        frame: pd.DataFrame,
        markdown: Optional[str] = None,
        title: Optional[str] = None,
    ) -> None:
        """CSV of ``frame`` plus markdown (``markdown`` or a rendering of the frame)."""
        self.write_csv(name, frame)
        self.write_markdown(name, markdown if markdown is not None else frame_to_markdown(frame), title)

    def write_summary(self, summary: Mapping[str, Any]) -> str:
        """``summary.json`` with sorted keys and no timestamps."""
        path = self._path("summary.json")
        payload = dict(_plain(summary), journal_sha256=self.journal_sha)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")
        self.written.append(path)
        return path
