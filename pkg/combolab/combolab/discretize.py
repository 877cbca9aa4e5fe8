"""Score discretization and imbalance-correcting class weights.

Classes are 0-based indices everywhere in the code. The score each class
stands for (1..C for ``ceil_half``, bin centres for ``equal_width``) lives in
``DiscretizationSpec.class_values`` and is what the expectation loss uses.
"""
import logging
import math
from dataclasses import dataclass
from typing import Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import ContractError, ImbalanceError, InputError

logger = logging.getLogger("ComboLabDiscretize")


class DiscretizationSpec(BaseModel):
    """Rule mapping a continuous score to one of ``num_classes`` classes.

    ``ceil_half`` is the 1..C rounding used for 1-5 rating data;
    ``equal_width`` splits ``score_range`` into equal bins. An equal-width
    discretization without a range is resolved from training scores via :meth:`fit`.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    rule: Literal["ceil_half", "equal_width"] = "ceil_half"
    num_classes: int = Field(5, ge=2)
    score_range: Optional[Tuple[float, float]] = None

    @model_validator(mode="after")
    def _check_range(self) -> "DiscretizationSpec":
        if self.score_range is not None:
            lo, hi = self.score_range
            if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
                raise ValueError("score_range must satisfy lo < hi, got {0}".format(self.score_range))
        return self

    @classmethod
    def hot_or_not(cls, score_range: Optional[Tuple[float, float]] = None) -> "DiscretizationSpec":
        """Three equal-width intervals."""
        return cls(rule="equal_width", num_classes=3, score_range=score_range)

    @property
    def fitted(self) -> bool:
        return self.rule == "ceil_half" or self.score_range is not None

    def _bounds(self) -> Tuple[float, float]:
        if self.score_range is None:
            raise ContractError("equal_width discretization needs score_range; call fit() on training scores")
        return self.score_range

    @property
    def class_values(self) -> Tuple[float, ...]:
        if self.rule == "ceil_half":
            return tuple(float(c) for c in range(1, self.num_classes + 1))
        lo, hi = self._bounds()
        width = (hi - lo) / self.num_classes
        return tuple(lo + (c + 0.5) * width for c in range(self.num_classes))

    def fit(self, train_scores: Sequence[float]) -> "DiscretizationSpec":
        """Resolve an equal-width range from training scores (no-op otherwise)."""
        if self.fitted:
            return self
        scores = np.asarray(train_scores, dtype=np.float64)
        if scores.size == 0:
            raise ContractError("cannot fit a discretization on an empty score list")
        lo, hi = float(scores.min()), float(scores.max())
        if not lo < hi:
            raise ContractError("equal_width needs a non-degenerate score range, all scores equal {0}".format(lo))
        logger.debug("Fitted equal-width range [{0}, {1}] on {2} scores".format(lo, hi, scores.size))
        return self.model_copy(update={"score_range": (lo, hi)})


@dataclass(frozen=True)
class ClassWeights:
    counts: np.ndarray
    weights: np.ndarray

    @property
    def num_classes(self) -> int:
        return int(self.counts.size)


def discretize_score(s: float, spec: DiscretizationSpec) -> int:
    """Class index of a single score."""
    s = float(s)
    if math.isnan(s):
        raise InputError("cannot discretize a NaN score")
    if not math.isfinite(s):
        raise InputError("cannot discretize a non-finite score {0!r}".format(s))
    if spec.rule == "ceil_half":
        level = min(max(math.ceil(s - 0.5), 1), spec.num_classes)
        return level - 1
    lo, hi = spec._bounds()
    width = (hi - lo) / spec.num_classes
    # out-of-range scores fall into the edge bins
    s = min(max(s, lo), hi)
    return min(max(math.floor((s - lo) / width), 0), spec.num_classes - 1)


def discretize_scores(scores: Sequence[float], spec: DiscretizationSpec) -> np.ndarray:
    """Vectorised :func:`discretize_score`."""
    s = np.asarray(scores, dtype=np.float64)
    if np.isnan(s).any():
        bad = int(np.flatnonzero(np.isnan(s))[0])
        raise InputError("cannot discretize a NaN score (index {0})".format(bad))
    if not np.isfinite(s).all():
        bad = int(np.flatnonzero(~np.isfinite(s))[0])
        raise InputError("cannot discretize a non-finite score (index {0})".format(bad))
    if spec.rule == "ceil_half":
        levels = np.clip(np.ceil(s - 0.5), 1, spec.num_classes)
        return levels.astype(np.int64) - 1
    lo, hi = spec._bounds()
    width = (hi - lo) / spec.num_classes
    return np.clip(np.floor((s - lo) / width), 0, spec.num_classes - 1).astype(np.int64)


def histogram(labels: Sequence[int], num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ContractError("labels must lie in [0, {0}), got range [{1}, {2}]".format(
            num_classes, int(labels.min()), int(labels.max())))
    return np.bincount(labels, minlength=num_classes)


def class_weights(labels: Sequence[int], num_classes: int) -> ClassWeights:
    """w_c = max_m |m| / |c|, so the largest class gets weight 1."""
    counts = histogram(labels, num_classes)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise ImbalanceError(int(empty[0]), counts.tolist())
    weights = counts.max() / counts.astype(np.float64)
    return ClassWeights(counts=counts, weights=weights)


def apply_spec(scores: Sequence[float], spec: DiscretizationSpec,
               train_indices: Optional[Sequence[int]] = None) -> Tuple[np.ndarray, ClassWeights]:
    """Label every score; weights (and any equal-width range) use the training part only."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ContractError("apply_spec needs at least one score")
    train = np.arange(scores.size) if train_indices is None else np.asarray(train_indices, dtype=np.int64)
    spec = spec.fit(scores[train])
    labels = discretize_scores(scores, spec)
    return labels, class_weights(labels[train], spec.num_classes)
