"""Confusion counts, precision/recall/F1, macro-F1 and series majority voting.

COVID is the positive class (label 1). The non-COVID scores are computed
symmetrically, treating ``tn`` as that class's true positives.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Iterable

import numpy as np

REPORT_KEYS = (
    "precision_covid", "recall_covid", "f1_covid",
    "precision_noncovid", "recall_noncovid", "f1_noncovid",
    "macro_f1", "accuracy", "tp", "fp", "fn", "tn",
)


def _check_label(label: int, what: str) -> int:
    if label not in (0, 1):
        raise ValueError(f"{what} must be 0 or 1, got {label!r}")
    return int(label)


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def add(self, predicted: int, true: int) -> "ConfusionCounts":
        predicted = _check_label(predicted, "predicted label")
        true = _check_label(true, "true label")
        if predicted and true:
            self.tp += 1
        elif predicted:
            self.fp += 1
        elif true:
            self.fn += 1
        else:
            self.tn += 1
        return self

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)


def accumulate(counts: ConfusionCounts, predicted_label: int, true_label: int) -> ConfusionCounts:
    return counts.add(predicted_label, true_label)


def confusion_from_labels(predicted: Iterable[int], true: Iterable[int]) -> ConfusionCounts:
    counts = ConfusionCounts()
    for p, t in zip(predicted, true, strict=True):
        counts.add(int(p), int(t))
    return counts


@dataclass
class EvalReport:
    precision_covid: float
    recall_covid: float
    f1_covid: float
    precision_noncovid: float
    recall_noncovid: float
    f1_noncovid: float
    macro_f1: float
    accuracy: float
    counts: ConfusionCounts
    threshold: float | None = None
    # Names of metrics whose denominator was zero (reported as 0.0).
    zero_division: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in REPORT_KEYS[:8]}
        out.update(asdict(self.counts))
        out["threshold"] = self.threshold
        out["zero_division"] = list(self.zero_division)
        return out

    def to_text(self) -> str:
        lines = []
        for key, value in self.to_dict().items():
            if isinstance(value, list):
                value = ",".join(value)
            lines.append(f"{key}={value}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        counts = ConfusionCounts(*(int(data[k]) for k in ("tp", "fp", "fn", "tn")))
        return cls(**{k: float(data[k]) for k in REPORT_KEYS[:8]}, counts=counts,
                   threshold=data.get("threshold"), zero_division=list(data.get("zero_division", [])))


def _ratio(num: int, den: int, name: str, flags: list[str]) -> Fraction:
    if den == 0:
        flags.append(name)
        return Fraction(0)
    return Fraction(num, den)


def _f1(p: Fraction, r: Fraction, name: str, flags: list[str]) -> Fraction:
    if p + r == 0:
        if name not in flags:
            flags.append(name)
        return Fraction(0)
    return 2 * p * r / (p + r)


def compute_report(counts: ConfusionCounts, threshold: float | None = None) -> EvalReport:
    """Precision, recall and F1 per class, their macro average, and accuracy.

    Arithmetic is exact (rational) and rounded once to float, so identical
    counts always give identical reports. ``threshold`` is recorded as the
    provenance of the binarized predictions.
    """
    if min(counts.tp, counts.fp, counts.fn, counts.tn) < 0:
        raise ValueError(f"negative confusion counts: {counts}")
    if counts.total == 0:
        raise ValueError("cannot compute a report over zero scored items")
    flags: list[str] = []
    pc = _ratio(counts.tp, counts.tp + counts.fp, "precision_covid", flags)
    rc = _ratio(counts.tp, counts.tp + counts.fn, "recall_covid", flags)
    fc = _f1(pc, rc, "f1_covid", flags)
    pn = _ratio(counts.tn, counts.tn + counts.fn, "precision_noncovid", flags)
    rn = _ratio(counts.tn, counts.tn + counts.fp, "recall_noncovid", flags)
    fn_ = _f1(pn, rn, "f1_noncovid", flags)
    return EvalReport(
        precision_covid=float(pc), recall_covid=float(rc), f1_covid=float(fc),
        precision_noncovid=float(pn), recall_noncovid=float(rn), f1_noncovid=float(fn_),
        macro_f1=float((fc + fn_) / 2),
        accuracy=float(Fraction(counts.tp + counts.tn, counts.total)),
        counts=ConfusionCounts(counts.tp, counts.fp, counts.fn, counts.tn),
        threshold=threshold,
        zero_division=flags,
    )


def threshold_predictions(probabilities: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Label 1 wherever ``p >= threshold``."""
    return (np.asarray(probabilities) >= threshold).astype(np.int64)


@dataclass(frozen=True)
class SeriesVote:
    label: int
    covid_votes: int
    noncovid_votes: int
    tie: bool


def majority_vote(slice_labels: Iterable[int]) -> SeriesVote:
    """Series label by majority of slice labels; an exact tie goes to COVID."""
    covid = noncovid = 0
    for label in slice_labels:
        if _check_label(int(label), "slice label"):
            covid += 1
        else:
            noncovid += 1
    if covid + noncovid == 0:
        raise ValueError("majority vote over an empty series")
    tie = covid == noncovid
    return SeriesVote(label=int(covid >= noncovid), covid_votes=covid, noncovid_votes=noncovid, tie=tie)
