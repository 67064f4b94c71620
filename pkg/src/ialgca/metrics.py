"""Confusion matrices and the UAR / WAR recall metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import ContractError


@dataclass
class ConfusionMatrix:
    """Counts with rows = true class, columns = predicted class."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ContractError(f"confusion matrix must be square, got {self.counts.shape}")
        if np.any(self.counts < 0):
            raise ContractError("confusion matrix counts must be non-negative")

    @classmethod
    def from_pairs(cls, true: Sequence[int], pred: Sequence[int], num_classes: int):
        counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(counts, (np.asarray(true, dtype=np.intp), np.asarray(pred, dtype=np.intp)), 1)
        return cls(counts)

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def support(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def recalls(self) -> np.ndarray:
        """Per-class recall; NaN for classes without samples."""
        support = self.support()
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(support > 0, np.diag(self.counts) / np.maximum(support, 1), np.nan)

    def war(self) -> float:
        if self.total == 0:
            return float("nan")
        return float(Fraction(int(np.trace(self.counts)), self.total))

    def uar(self) -> float:
        """Mean recall over classes with samples, rounded once from the exact rational.

        Exact arithmetic makes the value independent of summation order.
        """
        support = self.support()
        diag = np.diag(self.counts)
        fracs = [Fraction(int(d), int(n)) for d, n in zip(diag, support) if n > 0]
        if not fracs:
            return float("nan")
        return float(sum(fracs) / len(fracs))


@dataclass
class EvalReport:
    uar: float
    war: float
    recalls: List[float]
    confusion: ConfusionMatrix
    low_war: Optional[float] = None
    high_war: Optional[float] = None
    low_count: int = 0
    high_count: int = 0

    def to_dict(self) -> Dict:
        return {
            "uar": self.uar,
            "war": self.war,
            "recalls": [None if np.isnan(r) else float(r) for r in self.recalls],
            "confusion": self.confusion.counts.tolist(),
            "low_intensity_war": self.low_war,
            "high_intensity_war": self.high_war,
            "low_intensity_count": self.low_count,
            "high_intensity_count": self.high_count,
        }

    def to_text(self) -> str:
        def fmt(v):
            return "n/a" if v is None or (isinstance(v, float) and np.isnan(v)) else f"{v:.4f}"

        rows = [
            ("UAR", fmt(self.uar)),
            ("WAR", fmt(self.war)),
            (f"low-intensity WAR (n={self.low_count})", fmt(self.low_war)),
            (f"high-intensity WAR (n={self.high_count})", fmt(self.high_war)),
        ]
        rows += [(f"recall[{k}]", fmt(r)) for k, r in enumerate(self.recalls)]
        width = max(len(k) for k, _ in rows)
        lines = [f"{k:<{width}}  {v}" for k, v in rows]
        lines.append("confusion (rows true, cols predicted):")
        cw = max(len(str(c)) for c in self.confusion.counts.flat)
        for row in self.confusion.counts:
            lines.append("  " + " ".join(f"{c:>{cw}}" for c in row))
        return "\n".join(lines)


LOW_BIN = (0.0, 0.3)
HIGH_BIN = (0.3, 1.0)


def build_report(true, pred, num_classes, intensities=None) -> EvalReport:
    true = np.asarray(true, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    cm = ConfusionMatrix.from_pairs(true, pred, num_classes)
    report = EvalReport(cm.uar(), cm.war(), cm.recalls().tolist(), cm)
    if intensities is not None:
        ints = np.array([np.nan if v is None else v for v in intensities], dtype=np.float64)
        correct = true == pred
        # neutral clips carry intensity 0 and sit outside both bins
        low = (ints > LOW_BIN[0]) & (ints <= LOW_BIN[1])
        high = (ints > HIGH_BIN[0]) & (ints <= HIGH_BIN[1])
        report.low_count, report.high_count = int(low.sum()), int(high.sum())
        report.low_war = float(correct[low].mean()) if low.any() else None
        report.high_war = float(correct[high].mean()) if high.any() else None
    return report
