"""Confusion counts and the derived detection metrics."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

logger = logging.getLogger(__name__)

UNDEFINED = "undefined"
PHISHING = "Phishing"
NON_PHISHING = "NonPhishing"


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


@dataclass
class EvalReport:
    tp: int
    fp: int
    tn: int
    fn: int
    mean_time: float | None = None
    excluded: tuple[str, ...] = ()

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def acc(self) -> float | None:
        return _ratio(self.tp + self.tn, self.total)

    @property
    def tpr(self) -> float | None:
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def tnr(self) -> float | None:
        return _ratio(self.tn, self.tn + self.fp)

    @property
    def precision(self) -> float | None:
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def f1(self) -> float | None:
        p, r = self.precision, self.tpr
        if p is None or r is None or p + r == 0:
            return None
        return 2 * p * r / (p + r)

    def to_dict(self) -> dict:
        def fmt(x):
            return UNDEFINED if x is None else x

        return {
            "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
            "acc": fmt(self.acc), "tpr": fmt(self.tpr), "tnr": fmt(self.tnr),
            "precision": fmt(self.precision), "f1": fmt(self.f1),
            "mean_time": fmt(self.mean_time), "excluded": list(self.excluded),
        }


def confusion(pairs: Iterable[tuple[str, str]]) -> EvalReport:
    """Counts from (predicted, actual) verdict pairs."""
    tp = fp = tn = fn = 0
    for pred, actual in pairs:
        if actual == PHISHING:
            tp, fn = (tp + 1, fn) if pred == PHISHING else (tp, fn + 1)
        else:
            fp, tn = (fp + 1, tn) if pred == PHISHING else (fp, tn + 1)
    return EvalReport(tp, fp, tn, fn)


def evaluate(records: Iterable, truth: Mapping[str, str]) -> EvalReport:
    """Score verdict records (``.url``, ``.verdict``, ``.timings``) against ground truth.

    Records whose url has no ground truth are excluded with a warning.
    """
    pairs = []
    times = []
    excluded = []
    for rec in records:
        actual = truth.get(rec.url)
        if actual is None:
            excluded.append(rec.url)
            continue
        pairs.append((_verdict_str(rec.verdict), actual))
        total = (getattr(rec, "timings", None) or {}).get("total")
        if total is not None:
            times.append(total)
    if excluded:
        logger.warning("%d records without ground truth excluded", len(excluded))
    report = confusion(pairs)
    report.mean_time = sum(times) / len(times) if times else None
    report.excluded = tuple(excluded)
    return report


def _verdict_str(v) -> str:
    return getattr(v, "value", v)


def load_truth(path) -> dict[str, str]:
    """CSV with columns url,verdict (header row optional)."""
    out: dict[str, str] = {}
    with open(Path(path), newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().lower() == "url":
                continue
            if len(row) < 2:
                raise ValueError(f"{path}: malformed row {row!r}")
            verdict = row[1].strip()
            if verdict.lower() in ("phishing", "1", "true"):
                out[row[0].strip()] = PHISHING
            elif verdict.lower() in ("nonphishing", "non-phishing", "benign", "0", "false"):
                out[row[0].strip()] = NON_PHISHING
            else:
                raise ValueError(f"{path}: unknown verdict {verdict!r}")
    return out
