"""Analytic-versus-numeric gradient suite over primitives, losses, SE block and whole models."""
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from .autodiff import (
    Tape,
    Tensor,
    absolute,
    add,
    add_bias,
    channel_scale,
    clamp,
    conv2d,
    global_avg_pool,
    grad_check,
    log,
    matmul,
    mul,
    neg,
    reduce_mean,
    relu,
    reshape,
    sigmoid,
    softmax,
    sub,
    tensor_sum,
    transpose,
    where,
)
from .discretize import DiscretizationSpec, discretize_scores
from .losses import (
    BatchTargets,
    ComboLossParams,
    combo_loss,
    expectation_loss,
    huber_variant_loss,
    l1_regression_loss,
    mse_loss,
    smooth_l1_loss,
    weighted_cross_entropy,
)
from .model import Backbone, BackboneConfig, init_parameters, se_block

logger = logging.getLogger("ComboLabGradCheck")

DEFAULT_TOL = 1e-4
END_TO_END = "combo_loss end-to-end"
KINK_MARGIN = 1e-3
MAX_DRAWS = 100

Check = Tuple[Callable[[Tensor], Tensor], np.ndarray]
Builder = Callable[[np.random.Generator], List[Check]]


@dataclass(frozen=True)
class CheckResult:
    component: str
    worst: float
    points: int

    def passed(self, tol: float) -> bool:
        return self.worst < tol


def away_from(x: np.ndarray, kinks: Sequence[float] = (0.0,), margin: float = 0.05) -> np.ndarray:
    """Push entries lying within ``margin`` of a kink out past it."""
    x = np.array(x, dtype=np.float64)
    for k in kinks:
        close = np.abs(x - k) < margin
        x[close] = k + np.where(x[close] >= k, 2.0, -2.0) * margin
    return x


def kink_margin(f: Callable[[Tensor], Tensor], x0: np.ndarray) -> float:
    """Smallest |input| reaching a relu or abs while evaluating ``f`` at ``x0``."""
    with Tape() as tape:
        f(tape.watch(Tensor(x0)))
    margins = [float(np.abs(e.inputs[0].data).min()) for e in tape.entries
               if e.op in ("relu", "abs") and e.inputs[0].size]
    return min(margins, default=np.inf)


def _projected(build: Callable[[Tensor], Tensor], x0: np.ndarray, rng: np.random.Generator) -> Check:
    """Reduce a tensor-valued graph to a scalar with a fixed random projection."""
    shape = build(Tensor(x0)).shape
    weights = Tensor(rng.standard_normal(shape))
    return (lambda x: tensor_sum(build(x) * weights)), x0


def _targets(rng: np.random.Generator, n: int, num_classes: int = 5, scores=None) -> BatchTargets:
    scores = rng.uniform(1.0, 5.0, n) if scores is None else np.asarray(scores)
    classes = discretize_scores(np.clip(scores, 1.0, 5.0), DiscretizationSpec(num_classes=num_classes))
    return BatchTargets(scores, classes, rng.uniform(0.5, 3.0, num_classes))


def _expectation(logits: np.ndarray, values: Sequence[float]) -> np.ndarray:
    z = np.exp(logits - logits.max(axis=1, keepdims=True))
    return (z / z.sum(axis=1, keepdims=True)) @ np.asarray(values)


# -- component builders -----------------------------------------------------

def _unary(op: Callable[[Tensor], Tensor], shape=(3, 4), kinks=(), low=None) -> Builder:
    def build(rng):
        x0 = rng.standard_normal(shape)
        if low is not None:
            x0 = low + np.abs(x0)
        if kinks:
            x0 = away_from(x0, kinks)
        return [_projected(op, x0, rng)]
    return build


def _binary(op, lhs_shape, rhs_shape, side: str) -> Builder:
    def build(rng):
        lhs, rhs = rng.standard_normal(lhs_shape), rng.standard_normal(rhs_shape)
        if side == "lhs":
            return [_projected(lambda x: op(x, Tensor(rhs)), lhs, rng)]
        return [_projected(lambda x: op(Tensor(lhs), x), rhs, rng)]
    return build


def _where(rng):
    mask = rng.uniform(size=(3, 4)) < 0.5
    return [_projected(lambda x: where(mask, x * x, x * 3.0), rng.standard_normal((3, 4)), rng)]


def _regression(loss_fn, kinks) -> Builder:
    def build(rng):
        targets = _targets(rng, 8)
        pred = targets.scores + away_from(rng.normal(0.0, 1.0, 8), kinks)
        return [(lambda x: loss_fn(x, targets), pred)]
    return build


def _cross_entropy(rng):
    targets = _targets(rng, 6)
    return [(lambda x: weighted_cross_entropy(x, targets), rng.normal(0.0, 2.0, (6, 5)))]


def _expectation_pred(rng):
    params = ComboLossParams()
    logits = rng.normal(0.0, 2.0, (6, 5))
    pred = _expectation(logits, params.class_values) + away_from(rng.normal(0.0, 0.5, 6), margin=0.1)
    targets = _targets(rng, 6)
    return [(lambda x: expectation_loss(Tensor(pred), softmax(x), targets, params), logits)]


def _expectation_groundtruth(rng):
    params = ComboLossParams(expectation_mode="groundtruth")
    logits = rng.normal(0.0, 2.0, (6, 5))
    scores = _expectation(logits, params.class_values) + away_from(rng.normal(0.0, 0.5, 6), margin=0.1)
    targets = _targets(rng, 6, scores=scores)
    return [(lambda x: expectation_loss(None, softmax(x), targets, params), logits)]


def _combo_wrt(which: str) -> Builder:
    def build(rng):
        params = ComboLossParams()
        logits = rng.normal(0.0, 2.0, (6, 5))
        expected = _expectation(logits, params.class_values)
        # keep the prediction clear of both |pred - score| and |pred - E| kinks
        scores = expected + away_from(rng.normal(0.0, 0.7, 6), (0.0, -1.0, 1.0), margin=0.1)
        pred = expected + away_from(rng.normal(0.0, 0.5, 6), margin=0.1)
        pred = np.where(np.abs(pred - scores) < 0.1, pred + 0.3, pred)
        targets = _targets(rng, 6, scores=scores)
        if which == "logits":
            return [(lambda x: combo_loss(Tensor(pred), x, targets, params)[0], logits)]
        return [(lambda x: combo_loss(x, Tensor(logits), targets, params)[0], pred)]
    return build


def _se(which: str) -> Builder:
    def build(rng):
        for _ in range(MAX_DRAWS):
            u = rng.standard_normal((2, 8, 3, 3))
            w1 = rng.standard_normal((2, 8))
            w2 = rng.standard_normal((8, 2))
            if kink_margin(lambda x: se_block(x, Tensor(w1), Tensor(w2)), u) > KINK_MARGIN:
                break
        if which == "maps":
            return [_projected(lambda x: se_block(x, Tensor(w1), Tensor(w2)), u, rng)]
        if which == "w1":
            return [_projected(lambda x: se_block(Tensor(u), x, Tensor(w2)), w1, rng)]
        return [_projected(lambda x: se_block(Tensor(u), Tensor(w1), x), w2, rng)]
    return build


def _end_to_end(input_shape: Tuple[int, ...], widths: Tuple[int, ...]) -> Builder:
    """Combo loss through the SE backbone, checked against every parameter tensor.

    Draws are repeated until no relu or abs input sits within KINK_MARGIN of zero.
    """
    def build(rng):
        for _ in range(MAX_DRAWS):
            cfg = BackboneConfig(input_shape=input_shape, stage_widths=widths, reduction=2,
                                 num_classes=5, seed=int(rng.integers(2 ** 31)))
            params = init_parameters(cfg)
            model = Backbone(cfg)
            batch = rng.standard_normal((5,) + input_shape)
            targets = _targets(rng, 5)
            combo = ComboLossParams()
            checks: List[Check] = []
            for name in params.names():
                def f(x, name=name, params=params, model=model, batch=batch, targets=targets):
                    weights: Dict[str, Tensor] = params.constants()
                    weights[name] = x
                    pred, logits = model.forward(weights, batch)
                    return combo_loss(pred, logits, targets, combo)[0]
                checks.append((f, params[name].copy()))
            # the first stage weight sits upstream of every kink in the graph
            if kink_margin(*checks[0]) > KINK_MARGIN:
                break
        return checks
    return build


COMPONENTS: Dict[str, Builder] = {
    "add": _binary(add, (3, 4), (3, 4), "lhs"),
    "sub (lhs)": _binary(sub, (3, 4), (3, 4), "lhs"),
    "sub (rhs)": _binary(sub, (3, 4), (3, 4), "rhs"),
    "mul (lhs)": _binary(mul, (3, 4), (3, 4), "lhs"),
    "mul (rhs)": _binary(mul, (3, 4), (3, 4), "rhs"),
    "mul (scalar)": _binary(mul, (), (3, 4), "lhs"),
    "neg": _unary(neg),
    "abs": _unary(absolute, kinks=(0.0,)),
    "log": _unary(log, low=0.2),
    "relu": _unary(relu, kinks=(0.0,)),
    "sigmoid": _unary(sigmoid),
    "clamp": _unary(lambda x: clamp(x, -0.5, 0.5), kinks=(-0.5, 0.5)),
    "where": _where,
    "matmul (lhs)": _binary(matmul, (3, 4), (4, 2), "lhs"),
    "matmul (rhs)": _binary(matmul, (3, 4), (4, 2), "rhs"),
    "transpose": _unary(transpose),
    "reshape": _unary(lambda x: reshape(x, (2, 6))),
    "sum (axis 1)": _unary(lambda x: tensor_sum(x, axis=1)),
    "mean": _unary(reduce_mean),
    "softmax": _unary(softmax, shape=(4, 5)),
    "global_avg_pool": _unary(global_avg_pool, shape=(2, 3, 4, 4)),
    "channel_scale (maps)": _binary(channel_scale, (2, 3, 4, 4), (2, 3), "lhs"),
    "channel_scale (gate)": _binary(channel_scale, (2, 3, 4, 4), (2, 3), "rhs"),
    "add_bias (input)": _binary(add_bias, (2, 3, 4, 4), (3,), "lhs"),
    "add_bias (bias)": _binary(add_bias, (4, 3), (3,), "rhs"),
    "conv2d (input)": _binary(conv2d, (2, 2, 5, 5), (3, 2, 3, 3), "lhs"),
    "conv2d (kernel)": _binary(conv2d, (2, 2, 5, 5), (3, 2, 3, 3), "rhs"),
    "mse_loss": _regression(mse_loss, ()),
    "l1_regression_loss": _regression(l1_regression_loss, (0.0,)),
    "smooth_l1_loss": _regression(smooth_l1_loss, (0.0, -1.0, 1.0)),
    "huber_variant_loss": _regression(huber_variant_loss, (0.0, -1.0, 1.0)),
    "weighted_cross_entropy": _cross_entropy,
    "expectation_loss (pred)": _expectation_pred,
    "expectation_loss (groundtruth)": _expectation_groundtruth,
    "combo_loss (logits)": _combo_wrt("logits"),
    "combo_loss (predictions)": _combo_wrt("pred"),
    "se_block (maps)": _se("maps"),
    "se_block (w1)": _se("w1"),
    "se_block (w2)": _se("w2"),
    END_TO_END: _end_to_end((6,), (8, 4)),
    END_TO_END + " (conv)": _end_to_end((2, 5, 5), (4,)),
}


def run_gradcheck_suite(seed: int = 0, points: int = 3, h: float = 1e-5) -> List[CheckResult]:
    """Worst relative error per component over ``points`` seeded points each."""
    results: List[CheckResult] = []
    for index, (name, build) in enumerate(COMPONENTS.items()):
        rng = np.random.default_rng([seed, index])
        worst = 0.0
        checked = 0
        for _ in range(points):
            for f, x0 in build(rng):
                worst = max(worst, grad_check(f, x0, h))
                checked += 1
        logger.debug("{0}: worst relative error {1:.3e} over {2} points".format(name, worst, checked))
        results.append(CheckResult(name, worst, checked))
    return results


def failures(results: Sequence[CheckResult], tol: float = DEFAULT_TOL) -> List[CheckResult]:
    return [r for r in results if not r.passed(tol)]


def format_results(results: Sequence[CheckResult], tol: float = DEFAULT_TOL) -> str:
    width = max(len(r.component) for r in results)
    lines = ["{0:<{w}}  {1:>10}  {2:>6}  {3}".format("component", "worst", "points", "status", w=width)]
    for r in results:
        lines.append("{0:<{w}}  {1:>10.3e}  {2:>6}  {3}".format(
            r.component, r.worst, r.points, "ok" if r.passed(tol) else "FAIL", w=width))
    return "\n".join(lines) + "\n"
