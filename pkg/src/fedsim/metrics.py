"""Word error rate and the descriptive statistics used across the package."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import PreconditionError, UndefinedStatisticError


@dataclass(frozen=True)
class WerScore:
    errors: int
    ref_len: int

    @property
    def wer(self) -> float:
        return self.errors / self.ref_len

    def __add__(self, other: "WerScore") -> "WerScore":
        return WerScore(self.errors + other.errors, self.ref_len + other.ref_len)


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    """Levenshtein distance with unit substitution, deletion and insertion costs."""
    ref = list(ref)
    hyp = list(hyp)
    if not ref:
        return len(hyp)
    if not hyp:
        return len(ref)
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            cur[j] = min(
                prev[j] + 1,            # deletion
                cur[j - 1] + 1,         # insertion
                prev[j - 1] + (r != h), # substitution / match
            )
        prev = cur
    return prev[-1]


def wer(ref: Sequence, hyp: Sequence) -> WerScore:
    """Score one hypothesis against its reference.

    The rate may exceed 1 when the hypothesis carries many insertions.
    """
    ref = list(ref)
    if len(ref) == 0:
        raise PreconditionError("WER undefined for an empty reference")
    return WerScore(edit_distance(ref, hyp), len(ref))


def corpus_wer(pairs) -> WerScore:
    """Pooled WER over ``(ref, hyp)`` pairs: total errors over total reference tokens."""
    total = WerScore(0, 0)
    for ref, hyp in pairs:
        total = total + wer(ref, hyp)
    if total.ref_len == 0:
        raise PreconditionError("no references to score")
    return total


def population_std(values) -> float:
    values = np.asarray(values, dtype=float)
    return float(np.sqrt(np.mean((values - values.mean()) ** 2)))


def excess_kurtosis(samples) -> float:
    """Fisher excess kurtosis, biased moment estimator ``m4 / m2**2 - 3``."""
    x = np.asarray(samples, dtype=float)
    if x.size < 4:
        raise UndefinedStatisticError("kurtosis needs at least 4 samples")
    if np.all(x == x[0]):
        raise UndefinedStatisticError("kurtosis undefined for zero variance")
    centered = x - x.mean()
    m2 = np.mean(centered**2)
    if not np.isfinite(m2) or m2 == 0.0:
        raise UndefinedStatisticError("kurtosis undefined for zero variance")
    m4 = np.mean(centered**4)
    return float(m4 / m2**2 - 3.0)
