"""Regression, classification and expectation losses as differentiable graphs."""
import logging
from dataclasses import dataclass
from typing import Dict, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .autodiff import (
    Tensor,
    absolute,
    as_tensor,
    clamp,
    log,
    matmul,
    neg,
    reduce_mean,
    reshape,
    softmax,
    tensor_sum,
    where,
)
from .errors import ContractError, DimensionError

logger = logging.getLogger("ComboLabLosses")

LOSS_NAMES: Tuple[str, ...] = ("mse", "l1", "smooth_l1", "huber", "combo")

# Row labels of the loss comparison table. The Huber row is a stand-in: the
# exact "smooth Huber" form used in the literature is not published with it.
TABLE_LABELS: Dict[str, str] = {
    "l1": "L1 Loss",
    "mse": "MSE Loss",
    "smooth_l1": "Smooth L1 Loss",
    "huber": "Smooth Huber Loss (classic Huber stand-in)",
    "combo": "ComboLoss",
}

ExpectationMode = Literal["pred", "groundtruth"]


class ComboLossParams(BaseModel):
    """Weights of L_combo = alpha*L_reg + beta*L_exp + gamma*L_cls and their settings.

    ``expectation_mode`` picks what the expectation is compared against:
    the regression head output (``pred``) or the groundtruth score.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    alpha: float = Field(2.0, ge=0.0)
    beta: float = Field(1.0, ge=0.0)
    gamma: float = Field(1.0, ge=0.0)
    class_values: Tuple[float, ...] = (1.0, 2.0, 3.0, 4.0, 5.0)
    prob_clamp: float = Field(1e-12, gt=0.0, lt=1.0)
    expectation_mode: ExpectationMode = "pred"

    @model_validator(mode="after")
    def _check(self) -> "ComboLossParams":
        if not self.alpha + self.beta + self.gamma > 0.0:
            raise ValueError("alpha + beta + gamma must be positive")
        values = np.asarray(self.class_values, dtype=np.float64)
        if values.size < 2 or np.any(np.diff(values) <= 0.0):
            raise ValueError("class_values must hold at least 2 strictly increasing values")
        return self


@dataclass(frozen=True)
class BatchTargets:
    """Groundtruth scores, their class indices and the per-class weights."""

    scores: np.ndarray
    classes: np.ndarray
    class_weights: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)
        weights = np.asarray(self.class_weights, dtype=np.float64).reshape(-1)
        if scores.shape != classes.shape:
            raise ContractError("scores ({0}) and classes ({1}) differ in length".format(scores.size, classes.size))
        if weights.size == 0 or np.any(weights <= 0.0):
            raise ContractError("class_weights must all be positive")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "classes", classes)
        object.__setattr__(self, "class_weights", weights)

    @property
    def size(self) -> int:
        return int(self.scores.size)

    def subset(self, indices: Sequence[int]) -> "BatchTargets":
        idx = np.asarray(indices, dtype=np.int64)
        return BatchTargets(self.scores[idx], self.classes[idx], self.class_weights)


def _residual(pred_scores, targets: BatchTargets) -> Tensor:
    pred = as_tensor(pred_scores)
    if pred.ndim != 1 or pred.shape[0] != targets.size:
        raise ContractError("predictions of shape {0} do not match {1} targets".format(pred.shape, targets.size))
    if targets.size == 0:
        raise ContractError("losses need at least one sample")
    return pred - Tensor(targets.scores)


def l1_regression_loss(pred_scores, targets: BatchTargets) -> Tensor:
    """(1/N) * sum |s_hat - s|"""
    return reduce_mean(absolute(_residual(pred_scores, targets)))


def mse_loss(pred_scores, targets: BatchTargets) -> Tensor:
    d = _residual(pred_scores, targets)
    return reduce_mean(d * d)


def smooth_l1_loss(pred_scores, targets: BatchTargets, beta: float = 1.0) -> Tensor:
    """0.5*d^2/beta below beta, |d| - 0.5*beta above."""
    if beta <= 0.0:
        raise ContractError("smooth_l1 beta must be positive, got {0}".format(beta))
    d = _residual(pred_scores, targets)
    a = absolute(d)
    quadratic = d * d * (0.5 / beta)
    linear = a - 0.5 * beta
    return reduce_mean(where(a.data < beta, quadratic, linear))


def huber_variant_loss(pred_scores, targets: BatchTargets, delta: float = 1.0) -> Tensor:
    """Classic Huber: 0.5*d^2 inside delta, delta*(|d| - 0.5*delta) outside."""
    if delta <= 0.0:
        raise ContractError("huber delta must be positive, got {0}".format(delta))
    d = _residual(pred_scores, targets)
    a = absolute(d)
    quadratic = d * d * 0.5
    linear = (a - 0.5 * delta) * delta
    return reduce_mean(where(a.data <= delta, quadratic, linear))


def _check_logits(logits: Tensor, targets: BatchTargets) -> Tuple[int, int]:
    if logits.ndim != 2:
        raise DimensionError("weighted_cross_entropy", logits.shape)
    n, c = logits.shape
    if n != targets.size:
        raise ContractError("logits have {0} rows for {1} targets".format(n, targets.size))
    if n == 0:
        raise ContractError("losses need at least one sample")
    if targets.class_weights.size != c:
        raise ContractError("{0} class weights for {1} classes".format(targets.class_weights.size, c))
    if targets.classes.min() < 0 or targets.classes.max() >= c:
        raise ContractError("class index out of [0, {0}): range [{1}, {2}]".format(
            c, int(targets.classes.min()), int(targets.classes.max())))
    return n, c


def _cross_entropy_from_probs(probs: Tensor, targets: BatchTargets, prob_clamp: float) -> Tensor:
    n, c = probs.shape
    indicator = np.zeros((n, c))
    indicator[np.arange(n), targets.classes] = 1.0
    sample_weights = targets.class_weights[targets.classes]
    picked = tensor_sum(log(clamp(probs, prob_clamp, 1.0)) * indicator, axis=1)
    return neg(reduce_mean(picked * sample_weights))


def weighted_cross_entropy(logits, targets: BatchTargets, prob_clamp: float = 1e-12) -> Tensor:
    """-(1/N) * sum_i w_{c_i} * log softmax(logits)_{i, c_i}"""
    logits = as_tensor(logits)
    _check_logits(logits, targets)
    return _cross_entropy_from_probs(softmax(logits), targets, prob_clamp)


def expectation_score(probs, class_values: Sequence[float]) -> Tensor:
    """E_i = sum_j p_ij * class_values[j]"""
    probs = as_tensor(probs)
    values = np.asarray(class_values, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[1] != values.size:
        raise DimensionError("expectation_score", probs.shape, values.shape)
    row_sums = probs.data.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > 1e-9):
        raise ContractError("probability rows must sum to 1 (worst row sum {0!r})".format(
            float(row_sums[np.argmax(np.abs(row_sums - 1.0))])))
    return reshape(matmul(probs, Tensor(values.reshape(-1, 1))), (probs.shape[0],))


def expectation_loss(pred_scores, probs, targets: BatchTargets, params: ComboLossParams,
                     mode: Optional[ExpectationMode] = None) -> Tensor:
    """(1/N) * sum |x_i - E_i| with x = predictions ("pred") or groundtruth scores."""
    mode = mode or params.expectation_mode
    expectation = expectation_score(probs, params.class_values)
    if mode == "pred":
        reference = as_tensor(pred_scores)
    elif mode == "groundtruth":
        reference = Tensor(targets.scores)
    else:
        raise ContractError("unknown expectation mode {0!r}".format(mode))
    if reference.shape != expectation.shape:
        raise DimensionError("expectation_loss", reference.shape, expectation.shape)
    return reduce_mean(absolute(reference - expectation))


def combo_loss(pred_scores, logits, targets: BatchTargets,
               params: ComboLossParams) -> Tuple[Tensor, Dict[str, Tensor]]:
    """alpha*L_reg + beta*L_exp + gamma*L_cls, with the three parts for logging."""
    logits = as_tensor(logits)
    _check_logits(logits, targets)
    probs = softmax(logits)
    parts = {
        "reg": l1_regression_loss(pred_scores, targets),
        "exp": expectation_loss(pred_scores, probs, targets, params),
        "cls": _cross_entropy_from_probs(probs, targets, params.prob_clamp),
    }
    total = parts["reg"] * params.alpha + parts["exp"] * params.beta + parts["cls"] * params.gamma
    return total, parts


def objective(name: str, pred_scores, logits, targets: BatchTargets,
              combo: Optional[ComboLossParams] = None, smooth_l1_beta: float = 1.0,
              huber_delta: float = 1.0) -> Tuple[Tensor, Dict[str, Tensor]]:
    """Evaluate a training objective by name, returning ``(total, parts)``."""
    if name == "combo":
        if logits is None:
            raise ContractError("combo loss needs classification logits (dual-head model)")
        return combo_loss(pred_scores, logits, targets, combo or ComboLossParams())
    if name == "mse":
        total = mse_loss(pred_scores, targets)
    elif name == "l1":
        total = l1_regression_loss(pred_scores, targets)
    elif name == "smooth_l1":
        total = smooth_l1_loss(pred_scores, targets, smooth_l1_beta)
    elif name == "huber":
        total = huber_variant_loss(pred_scores, targets, huber_delta)
    else:
        raise ContractError("unknown loss {0!r}; valid names: {1}".format(name, ", ".join(LOSS_NAMES)))
    return total, {name: total}
