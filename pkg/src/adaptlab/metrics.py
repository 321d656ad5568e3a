"""Equal error rate from per-utterance detection scores.

Scores follow the bonafide-minus-spoof convention: bonafide records
should score high. Sweeping a threshold t over the sorted unique scores
gives the two step functions

    FRR(t) = fraction of bonafide with score <= t   (non-decreasing)
    FAR(t) = fraction of spoof with score > t       (non-increasing)

so FAR - FRR is non-increasing; the EER is read at the first sign
change, linearly interpolated between the two adjacent operating points
(ties break toward the lower threshold). The value is invariant under
any strictly increasing transform of the scores.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import LABEL_BONAFIDE, LABEL_SPOOF


class UndefinedEerError(ValueError):
    """EER needs at least one score from each class."""


@dataclass(frozen=True)
class EvalResult:
    eer_percent: float
    threshold_at_eer: float
    num_bonafide: int
    num_spoof: int


@dataclass
class ScoreSet:
    """Labeled detection scores; the unit the evaluator consumes."""

    labels: np.ndarray  # int, LABEL_BONAFIDE / LABEL_SPOOF
    scores: np.ndarray  # float, bonafide minus spoof logit

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.labels.shape != self.scores.shape or self.labels.ndim != 1:
            raise ValueError(
                f"labels and scores must be matching 1-d arrays, "
                f"got {self.labels.shape} and {self.scores.shape}"
            )


def compute_eer(scores: ScoreSet) -> EvalResult:
    bona = np.sort(scores.scores[scores.labels == LABEL_BONAFIDE])
    spoof = np.sort(scores.scores[scores.labels == LABEL_SPOOF])
    if len(bona) == 0 or len(spoof) == 0:
        raise UndefinedEerError(
            f"undefined EER: need both classes, got {len(bona)} bonafide / {len(spoof)} spoof"
        )

    thresholds = np.unique(scores.scores)
    # counts via binary search on the per-class sorted arrays
    frr = np.searchsorted(bona, thresholds, side="right") / len(bona)
    far = 1.0 - np.searchsorted(spoof, thresholds, side="right") / len(spoof)
    diff = far - frr  # non-increasing in the threshold

    crossing = int(np.argmax(diff <= 0.0))  # first index where the sign flips
    if diff[crossing] > 0.0:  # no crossing found (cannot happen: last diff = -FRR <= 0)
        return EvalResult(50.0, float(thresholds[-1]), len(bona), len(spoof))

    if crossing == 0:
        prev_frr, prev_far, prev_t = 0.0, 1.0, float(thresholds[0])
    else:
        prev_frr = float(frr[crossing - 1])
        prev_far = float(far[crossing - 1])
        prev_t = float(thresholds[crossing - 1])
    d_prev = prev_far - prev_frr
    d_cross = float(diff[crossing])
    frac = 1.0 if d_prev == d_cross else d_prev / (d_prev - d_cross)
    eer = prev_frr + frac * (float(frr[crossing]) - prev_frr)
    threshold = prev_t + frac * (float(thresholds[crossing]) - prev_t)
    return EvalResult(100.0 * eer, threshold, len(bona), len(spoof))


def eer_percent(labels, score_values) -> float:
    """Convenience wrapper returning only the EER percentage."""
    return compute_eer(ScoreSet(np.asarray(labels), np.asarray(score_values))).eer_percent
