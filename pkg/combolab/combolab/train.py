"""Momentum SGD, step-decay schedule, the training loop and its evaluation harnesses."""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Literal, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .autodiff import Tape, backward
from .data import AugmentConfig, Dataset, augment, kfold, split_60_40
from .discretize import DiscretizationSpec, class_weights, discretize_scores
from .errors import ContractError, DimensionError, DivergenceError, SampleShapeError
from .losses import LOSS_NAMES, TABLE_LABELS, BatchTargets, ComboLossParams, objective
from .model import Backbone, BackboneConfig, Forward, Parameters, init_parameters, make_forward
from .settings import get_settings

logger = logging.getLogger("ComboLabTrain")

LossName = Literal["mse", "l1", "smooth_l1", "huber", "combo"]

# Published SCUT-FBP5500 60/40 figures (MAE, RMSE, PC) that the comparison
# table mirrors. Synthetic runs do not reproduce them.
PUBLISHED_REFERENCE_ROWS: Dict[str, Tuple[float, float, float]] = {
    "l1": (0.2191, 0.2918, 0.9030),
    "mse": (0.2195, 0.2947, 0.9008),
    "smooth_l1": (0.2194, 0.2869, 0.9064),
    "huber": (0.2196, 0.2903, 0.9052),
    "combo": (0.2126, 0.2813, 0.9117),
}

EVAL_BATCH = 256


class TrainConfig(BaseModel):
    """Optimizer, schedule and objective settings. Defaults follow the published protocol."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    lr0: float = Field(0.01, gt=0.0)
    decay_every: int = Field(50, ge=1)
    decay_factor: float = Field(10.0, gt=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(0.001, ge=0.0)
    batch_size: int = Field(64, ge=1)
    epochs: int = Field(200, ge=0)
    loss: LossName = "combo"
    combo: ComboLossParams = ComboLossParams()
    smooth_l1_beta: float = Field(1.0, gt=0.0)
    huber_delta: float = Field(1.0, gt=0.0)
    seed: int = 0
    log_every: int = Field(10, ge=1)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """lr0 / decay_factor ** floor(epoch / decay_every)"""
    if epoch < 0:
        raise ContractError("epoch must be non-negative, got {0}".format(epoch))
    return cfg.lr0 / cfg.decay_factor ** (epoch // cfg.decay_every)


# -- optimizer --------------------------------------------------------------

def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
             state: Mapping[str, np.ndarray], lr: float, momentum: float, weight_decay: float,
             step: Optional[int] = None, loss: Optional[float] = None
             ) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray]]:
    """One heavy-ball step with L2 decay folded into the gradient.

    g' = g + weight_decay * theta; v = momentum * v + g'; theta = theta - lr * v.
    Missing velocity entries start at zero. Inputs are not modified.

    Returns:
        (new params, new velocity state)
    """
    new_params: Dict[str, np.ndarray] = {}
    new_state: Dict[str, np.ndarray] = {}
    for name, theta in params.items():
        theta = np.asarray(theta, dtype=np.float64)
        if name not in grads:
            raise ContractError("no gradient for parameter {0}".format(name))
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != theta.shape:
            raise DimensionError("sgd_step[{0}]".format(name), theta.shape, g.shape)
        if not np.isfinite(g).all():
            raise DivergenceError("non-finite gradient", step=step, loss=loss, parameter=name)
        v = state.get(name)
        v = np.zeros_like(theta) if v is None else np.asarray(v, dtype=np.float64)
        v = momentum * v + (g + weight_decay * theta)
        updated = theta - lr * v
        if not np.isfinite(updated).all():
            raise DivergenceError("parameter overflowed", step=step, loss=loss, parameter=name)
        new_params[name] = updated
        new_state[name] = v
    return new_params, new_state


class MomentumSGD:
    """Owns the velocity buffers and applies :func:`sgd_step` to a Parameters set in place."""

    def __init__(self, momentum: float = 0.9, weight_decay: float = 0.001):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.state: Dict[str, np.ndarray] = {}
        self.steps = 0

    def step(self, params: Parameters, grads: Mapping[str, np.ndarray], lr: float,
             loss: Optional[float] = None) -> None:
        updated, self.state = sgd_step(params.tensors, grads, self.state, lr,
                                       self.momentum, self.weight_decay, step=self.steps, loss=loss)
        params.tensors.update(updated)
        self.steps += 1


# -- metrics ----------------------------------------------------------------

@dataclass(frozen=True)
class MetricsReport:
    """MAE, RMSE and Pearson correlation. ``pc`` is None when either side has zero variance.

    For cross-validation the top-level numbers are the means over ``per_fold``.
    """

    mae: float
    rmse: float
    pc: Optional[float]
    n: int
    per_fold: Tuple["MetricsReport", ...] = ()

    @property
    def pc_defined(self) -> bool:
        return self.pc is not None

    def to_dict(self) -> dict:
        out = {"mae": self.mae, "rmse": self.rmse, "pc": self.pc, "pc_defined": self.pc_defined, "n": self.n}
        if self.per_fold:
            out["per_fold"] = [f.to_dict() for f in self.per_fold]
        return out


def pearson(x: np.ndarray, y: np.ndarray) -> Optional[float]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 2 or np.all(x == x[0]) or np.all(y == y[0]):
        return None
    dx = x - x.mean()
    dy = y - y.mean()
    r = float(np.sum(dx * dy) / math.sqrt(float(np.sum(dx * dx)) * float(np.sum(dy * dy))))
    return min(max(r, -1.0), 1.0)


def metrics_from_predictions(pred: Sequence[float], truth: Sequence[float]) -> MetricsReport:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    truth = np.asarray(truth, dtype=np.float64).reshape(-1)
    if pred.shape != truth.shape or pred.size == 0:
        raise ContractError("need equally sized non-empty vectors, got {0} and {1}".format(pred.size, truth.size))
    d = pred - truth
    mae = float(np.mean(np.abs(d)))
    # sqrt rounding can land an ulp under the mean absolute error
    rmse = max(math.sqrt(float(np.mean(d * d))), mae)
    pc = pearson(pred, truth)
    if pc is None:
        logger.warning("Pearson correlation undefined: zero variance in predictions or targets")
    return MetricsReport(mae=mae, rmse=rmse, pc=pc, n=int(pred.size))


def summarize_folds(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Arithmetic means over folds; PC averages the folds where it is defined."""
    if not reports:
        raise ContractError("no fold reports to summarize")
    pcs = [r.pc for r in reports if r.pc is not None]
    if len(pcs) < len(reports):
        logger.warning("{0} of {1} folds have undefined PC; averaging the rest".format(len(reports) - len(pcs), len(reports)))
    return MetricsReport(
        mae=float(np.mean([r.mae for r in reports])),
        rmse=float(np.mean([r.rmse for r in reports])),
        pc=float(np.mean(pcs)) if pcs else None,
        n=int(sum(r.n for r in reports)),
        per_fold=tuple(reports),
    )


def predict(forward: Forward, dataset: Dataset, indices: Optional[Sequence[int]] = None) -> np.ndarray:
    """Regression-head outputs, computed in fixed-size batches off-tape."""
    idx = np.arange(len(dataset)) if indices is None else np.asarray(indices, dtype=np.int64)
    out = np.empty(idx.size)
    for start in range(0, idx.size, EVAL_BATCH):
        chunk = idx[start:start + EVAL_BATCH]
        pred, _ = forward(dataset.features[chunk])
        out[start:start + chunk.size] = pred.data
    return out


def evaluate(params: Parameters, forward: Optional[Forward], dataset: Dataset,
             indices: Optional[Sequence[int]] = None) -> MetricsReport:
    if forward is None:
        forward = make_forward(params)
    idx = np.arange(len(dataset)) if indices is None else np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        raise ContractError("cannot evaluate on an empty index set")
    if tuple(params.config.input_shape or ()) != dataset.sample_shape:
        raise SampleShapeError("model input", tuple(params.config.input_shape or ()), dataset.sample_shape)
    return metrics_from_predictions(predict(forward, dataset, idx), dataset.scores[idx])


# -- training loop ----------------------------------------------------------

@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    parts: Dict[str, float] = field(default_factory=dict)

    def to_record(self) -> dict:
        return {"epoch": self.epoch, "lr": self.lr, "loss": self.loss, "parts": dict(sorted(self.parts.items()))}


@dataclass
class TrainResult:
    params: Parameters
    forward: Forward
    history: List[EpochRecord]
    spec: DiscretizationSpec
    class_weights: np.ndarray


def _resolve_backbone(backbone: BackboneConfig, dataset: Dataset, spec: DiscretizationSpec,
                      loss: str) -> BackboneConfig:
    if backbone.input_shape is None:
        backbone = backbone.with_input_shape(dataset.sample_shape)
    elif tuple(backbone.input_shape) != dataset.sample_shape:
        raise SampleShapeError("backbone input", tuple(backbone.input_shape), dataset.sample_shape)
    if backbone.dual_head and backbone.num_classes != spec.num_classes:
        logger.warning("Backbone num_classes {0} overridden by discretization ({1})".format(
            backbone.num_classes, spec.num_classes))
        backbone = BackboneConfig.model_validate({**backbone.model_dump(), "num_classes": spec.num_classes})
    if loss == "combo" and not backbone.dual_head:
        raise ContractError("combo loss needs a dual-head backbone (backbone.dual_head = true)")
    return backbone


def fit_model(dataset: Dataset, spec: DiscretizationSpec, backbone: BackboneConfig, cfg: TrainConfig,
              indices: Optional[Sequence[int]] = None,
              augment_cfg: Optional[AugmentConfig] = None) -> TrainResult:
    """Train on ``indices`` (default: every sample) and keep everything needed afterwards."""
    train_idx = np.arange(len(dataset)) if indices is None else np.asarray(indices, dtype=np.int64)
    if train_idx.size == 0:
        raise ContractError("training needs at least one sample")
    backbone = _resolve_backbone(backbone, dataset, spec, cfg.loss)

    scores = dataset.scores[train_idx]
    spec = spec.fit(scores)
    if cfg.loss == "combo":
        labels = discretize_scores(scores, spec)
        weights = class_weights(labels, spec.num_classes).weights
    else:
        labels = np.zeros(scores.size, dtype=np.int64)
        weights = np.ones(spec.num_classes)
    targets = BatchTargets(scores, labels, weights)
    combo = cfg.combo.model_copy(update={"class_values": spec.class_values})

    params = init_parameters(backbone)
    model = Backbone(backbone)
    optimizer = MomentumSGD(cfg.momentum, cfg.weight_decay)
    shuffle_rng = np.random.default_rng(cfg.seed)
    augment_rng = np.random.default_rng([cfg.seed, 1])
    features = dataset.features[train_idx]
    n = train_idx.size

    history: List[EpochRecord] = []
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = shuffle_rng.permutation(n)
        loss_sum = 0.0
        part_sums: Dict[str, float] = {}
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            x = features[batch]
            if augment_cfg is not None and augment_cfg.enabled:
                x = augment(x, augment_cfg, augment_rng)
            with Tape() as tape:
                weights_on_tape = params.bind(tape)
                pred, logits = model.forward(weights_on_tape, x)
                total, parts = objective(cfg.loss, pred, logits, targets.subset(batch), combo,
                                         cfg.smooth_l1_beta, cfg.huber_delta)
                value = total.item()
                if not math.isfinite(value):
                    raise DivergenceError("loss is not finite", step=optimizer.steps, loss=value)
                backward(total, tape)
            grads = {name: (t.grad if t.grad is not None else np.zeros_like(t.data))
                     for name, t in weights_on_tape.items()}
            optimizer.step(params, grads, lr, loss=value)
            loss_sum += value * batch.size
            for key, part in parts.items():
                part_sums[key] = part_sums.get(key, 0.0) + part.item() * batch.size
            logger.debug("epoch {0} step {1}: loss {2:.6f}".format(epoch, optimizer.steps, value))

        record = EpochRecord(epoch, lr, loss_sum / n, {k: v / n for k, v in part_sums.items()})
        history.append(record)
        if epoch == 0 or (epoch + 1) % cfg.log_every == 0 or epoch + 1 == cfg.epochs:
            logger.info(f"[{cfg.loss}] epoch {epoch + 1}/{cfg.epochs} lr={lr:g} loss={record.loss:.6f}")

    return TrainResult(params, make_forward(params), history, spec, weights)


def train_model(dataset: Dataset, spec: DiscretizationSpec, backbone: BackboneConfig, cfg: TrainConfig,
                indices: Optional[Sequence[int]] = None,
                augment_cfg: Optional[AugmentConfig] = None) -> Tuple[Parameters, List[EpochRecord]]:
    """Minimise the configured objective; returns the trained parameters and per-epoch history."""
    result = fit_model(dataset, spec, backbone, cfg, indices, augment_cfg)
    return result.params, result.history


# -- harnesses --------------------------------------------------------------

def _run_jobs(jobs: Sequence[Callable[[], object]], threads: Optional[int]) -> List[object]:
    """Run independent jobs, in a thread pool when allowed; results keep job order."""
    threads = get_settings().threads if threads is None else threads
    if threads <= 1 or len(jobs) <= 1:
        return [job() for job in jobs]
    with ThreadPoolExecutor(max_workers=min(threads, len(jobs))) as pool:
        futures = [pool.submit(job) for job in jobs]
        return [f.result() for f in futures]


@dataclass(frozen=True)
class FoldOutcome:
    fold: int
    metrics: MetricsReport
    history: List[EpochRecord]
    train_size: int
    test_size: int


def run_folds(dataset: Dataset, k: int, spec: DiscretizationSpec, backbone: BackboneConfig,
              cfg: TrainConfig, seed: Optional[int] = None, augment_cfg: Optional[AugmentConfig] = None,
              threads: Optional[int] = None) -> List[FoldOutcome]:
    """Train one model per fold on its complement; class weights are recomputed per fold."""
    if k < 2:
        raise ContractError("cross validation needs k >= 2, got {0}".format(k))
    plan = kfold(len(dataset), k, cfg.seed if seed is None else seed)

    def job(fold: int) -> FoldOutcome:
        train_idx, test_idx = plan.split(fold)
        result = fit_model(dataset, spec, backbone, cfg, train_idx, augment_cfg)
        metrics = evaluate(result.params, result.forward, dataset, test_idx)
        logger.info("Fold {0}/{1}: MAE={2:.4f} RMSE={3:.4f} PC={4}".format(
            fold + 1, k, metrics.mae, metrics.rmse, "undefined" if metrics.pc is None else "{0:.4f}".format(metrics.pc)))
        return FoldOutcome(fold, metrics, result.history, int(train_idx.size), int(test_idx.size))

    return _run_jobs([lambda f=f: job(f) for f in range(k)], threads)


def cross_validate(dataset: Dataset, k: int, spec: DiscretizationSpec, backbone: BackboneConfig,
                   cfg: TrainConfig, seed: Optional[int] = None, augment_cfg: Optional[AugmentConfig] = None,
                   threads: Optional[int] = None) -> MetricsReport:
    outcomes = run_folds(dataset, k, spec, backbone, cfg, seed, augment_cfg, threads)
    return summarize_folds([o.metrics for o in outcomes])


@dataclass(frozen=True)
class LossRow:
    loss: str
    label: str
    metrics: MetricsReport
    history: List[EpochRecord]
    params: Optional[Parameters] = None


def check_loss_names(losses: Sequence[str]) -> List[str]:
    names = [name.strip() for name in losses if name.strip()]
    unknown = [name for name in names if name not in LOSS_NAMES]
    if unknown or not names:
        raise ContractError("unknown loss name(s) {0}; valid names: {1}".format(
            ", ".join(unknown) or "(none given)", ", ".join(LOSS_NAMES)))
    return names


def compare_losses(dataset: Dataset, losses: Sequence[str], spec: DiscretizationSpec,
                   backbone: BackboneConfig, cfg: TrainConfig, seed: Optional[int] = None,
                   augment_cfg: Optional[AugmentConfig] = None,
                   threads: Optional[int] = None) -> List[LossRow]:
    """Train one model per loss on the same 60/40 split from the same initialisation."""
    names = check_loss_names(losses)
    train_idx, test_idx = split_60_40(len(dataset), cfg.seed if seed is None else seed)

    def job(name: str) -> LossRow:
        run_cfg = cfg.model_copy(update={"loss": name})
        result = fit_model(dataset, spec, backbone, run_cfg, train_idx, augment_cfg)
        metrics = evaluate(result.params, result.forward, dataset, test_idx)
        return LossRow(name, TABLE_LABELS[name], metrics, result.history, result.params)

    return _run_jobs([lambda n=name: job(n) for name in names], threads)
