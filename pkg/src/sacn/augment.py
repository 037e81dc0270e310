"""Strong-view augmentation: random feature-dimension masking.

The graph structure is never touched; a strong view zeroes an exact count of
feature columns across all nodes.  The weak view is simply the unmodified
input, so it needs no code here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MaskPlan:
    masked_dims: np.ndarray
    rate: float
    seed: int | None = None

    def __post_init__(self):
        self.masked_dims.setflags(write=False)


def draw_mask_plan(num_features: int, rate: float, rng) -> MaskPlan:
    """Choose exactly ``round(rate * m)`` feature dimensions without replacement.

    ``rng`` is a numpy Generator or an int seed.  Two independent draws (one
    per strong view) come from two independent generators.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"mask rate must be in [0, 1], got {rate}")
    seed = rng if isinstance(rng, (int, np.integer)) else None
    gen = np.random.default_rng(rng) if seed is not None else rng
    count = int(np.floor(rate * num_features + 0.5))
    dims = np.sort(gen.choice(num_features, size=count, replace=False)) if count \
        else np.zeros(0, dtype=np.int64)
    return MaskPlan(dims.astype(np.int64), rate, seed)


def keep_vector(plan: MaskPlan, num_features: int, dtype=np.float64) -> np.ndarray:
    """1.0 for surviving dimensions, 0.0 for masked ones."""
    keep = np.ones(num_features, dtype=dtype)
    keep[plan.masked_dims] = 0.0
    return keep


def feature_mask(features: np.ndarray, rate: float, rng) -> tuple[np.ndarray, MaskPlan]:
    """Zero the planned feature columns across all nodes; structure untouched."""
    plan = draw_mask_plan(features.shape[1], rate, rng)
    masked = features * keep_vector(plan, features.shape[1], features.dtype)
    return masked, plan
