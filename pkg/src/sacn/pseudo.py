"""Class-aware pseudolabel selection from high-confidence weak-view predictions.

Selection runs independently inside every predicted class: rank that class's
unlabeled candidates by confidence and keep the top quota.  A single global
threshold would let one over-confident class crowd out the rest; per-class
ranking is robust to imbalance.  Ties break toward the lower node index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PseudoLabelSet:
    """Selected unlabeled nodes with their hard one-hot targets."""

    indices: np.ndarray
    targets: np.ndarray
    per_class_counts: np.ndarray

    def __post_init__(self):
        for arr in (self.indices, self.targets, self.per_class_counts):
            arr.setflags(write=False)

    @property
    def selected_count(self) -> int:
        return int(self.indices.size)

    @staticmethod
    def empty(num_classes: int) -> "PseudoLabelSet":
        return PseudoLabelSet(np.zeros(0, dtype=np.int64),
                              np.zeros((0, num_classes)),
                              np.zeros(num_classes, dtype=np.int64))

    def mean_confidence(self, y: np.ndarray) -> float:
        if self.selected_count == 0:
            return 0.0
        return float(y[self.indices].max(axis=1).mean())


@dataclass(frozen=True)
class QuotaSchedule:
    """Per-class selection fraction growing stepwise across stage-two rounds."""

    initial_fraction: float = 0.05
    growth_per_round: float = 0.05
    cap_fraction: float = 0.5
    round_length: int = 50

    def __post_init__(self):
        if not 0.0 <= self.initial_fraction <= self.cap_fraction <= 1.0:
            raise ValueError("need 0 <= initial <= cap <= 1")
        if self.growth_per_round < 0 or self.round_length < 1:
            raise ValueError("growth must be >= 0 and round_length >= 1")


def quota_at(schedule: QuotaSchedule, epochs_since_stage_start: int,
             per_class_available: np.ndarray) -> np.ndarray:
    """Quota per class after the given number of stage-two epochs."""
    if epochs_since_stage_start < 0:
        raise ValueError("quota_at is defined from the stage-two start onward")
    rounds = epochs_since_stage_start // schedule.round_length
    fraction = min(schedule.cap_fraction,
                   schedule.initial_fraction + schedule.growth_per_round * rounds)
    return np.floor(fraction * np.asarray(per_class_available) + 0.5).astype(np.int64)


def select_class_aware(y_weak: np.ndarray, unlabeled_idx: np.ndarray,
                       quota_per_class: np.ndarray) -> PseudoLabelSet:
    """Top-quota most confident candidates per predicted class.

    ``y_weak`` must come from an eval-mode (deterministic) weak-view forward.
    Classes with no candidates simply contribute nothing.
    """
    unlabeled_idx = np.asarray(unlabeled_idx, dtype=np.int64)
    num_classes = y_weak.shape[1]
    quota_per_class = np.asarray(quota_per_class, dtype=np.int64)
    if quota_per_class.shape != (num_classes,):
        raise ValueError(f"need one quota per class, got shape {quota_per_class.shape}")
    if unlabeled_idx.size == 0:
        return PseudoLabelSet.empty(num_classes)

    probs = y_weak[unlabeled_idx]
    predicted = probs.argmax(axis=1)
    confidence = probs.max(axis=1)

    chosen: list[int] = []
    chosen_class: list[int] = []
    counts = np.zeros(num_classes, dtype=np.int64)
    for cls in range(num_classes):
        in_class = np.nonzero(predicted == cls)[0]
        if in_class.size == 0 or quota_per_class[cls] <= 0:
            continue
        # stable sort on (-confidence, node index): lower index wins ties
        order = np.lexsort((unlabeled_idx[in_class], -confidence[in_class]))
        keep = in_class[order[:quota_per_class[cls]]]
        chosen.extend(unlabeled_idx[keep].tolist())
        chosen_class.extend([cls] * keep.size)
        counts[cls] = keep.size

    if not chosen:
        return PseudoLabelSet.empty(num_classes)
    indices = np.asarray(chosen, dtype=np.int64)
    classes = np.asarray(chosen_class, dtype=np.int64)
    order = np.argsort(indices)
    indices, classes = indices[order], classes[order]
    targets = np.zeros((indices.size, num_classes))
    targets[np.arange(indices.size), classes] = 1.0
    return PseudoLabelSet(indices, targets, counts)
