import math

import numpy as np
import numpy.testing as npt
import pytest
from pydantic import ValidationError

from combolab.autodiff import Tape, Tensor, backward, softmax
from combolab.errors import ContractError, DimensionError
from combolab.losses import (
    LOSS_NAMES,
    TABLE_LABELS,
    BatchTargets,
    ComboLossParams,
    combo_loss,
    expectation_loss,
    expectation_score,
    huber_variant_loss,
    l1_regression_loss,
    mse_loss,
    objective,
    smooth_l1_loss,
    weighted_cross_entropy,
)


def _targets(scores, classes=None, weights=(1.0, 1.0, 1.0, 1.0, 1.0)):
    scores = np.asarray(scores, dtype=float)
    classes = np.zeros(scores.size, dtype=int) if classes is None else classes
    return BatchTargets(scores, classes, np.asarray(weights))


def test_l1_example():
    loss = l1_regression_loss(Tensor([3.0, 4.0]), _targets([2.5, 4.5]))
    assert loss.item() == pytest.approx(0.5, abs=1e-15)


def test_l1_is_zero_on_exact_predictions():
    assert l1_regression_loss(Tensor([1.0, 2.0, 3.0]), _targets([1.0, 2.0, 3.0])).item() == 0.0


def test_regression_losses_reject_mismatched_sizes():
    with pytest.raises(ContractError):
        l1_regression_loss(Tensor([1.0, 2.0]), _targets([1.0]))


def test_mse_and_smooth_l1_values():
    targets = _targets([0.0, 0.0])
    pred = Tensor([0.5, 3.0])
    assert mse_loss(pred, targets).item() == pytest.approx((0.25 + 9.0) / 2)
    # 0.5 * 0.25 inside, 3 - 0.5 outside
    assert smooth_l1_loss(pred, targets).item() == pytest.approx((0.125 + 2.5) / 2)
    # classic Huber with delta 2: 0.125 inside, 2 * (3 - 1) outside
    assert huber_variant_loss(pred, targets, delta=2.0).item() == pytest.approx((0.125 + 4.0) / 2)


def test_uniform_two_class_cross_entropy_is_ln2():
    targets = BatchTargets([1.0, 2.0], [0, 1], [1.0, 1.0])
    loss = weighted_cross_entropy(Tensor(np.zeros((2, 2))), targets)
    assert abs(loss.item() - math.log(2.0)) < 1e-12


def test_cross_entropy_uses_class_weights():
    logits = np.array([[2.0, 0.0], [0.5, 1.5]])
    targets = BatchTargets([1.0, 2.0], [0, 1], [1.0, 3.0])
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    expected = -(1.0 * np.log(p[0, 0]) + 3.0 * np.log(p[1, 1])) / 2
    assert weighted_cross_entropy(Tensor(logits), targets).item() == pytest.approx(expected, rel=1e-12)


def test_cross_entropy_rejects_bad_class_index():
    targets = BatchTargets([1.0], [2], [1.0, 1.0])
    with pytest.raises(ContractError):
        weighted_cross_entropy(Tensor(np.zeros((1, 2))), targets)


def test_confident_wrong_logits_stay_finite():
    targets = BatchTargets([1.0], [0], [1.0, 1.0])
    loss = weighted_cross_entropy(Tensor([[-1000.0, 1000.0]]), targets)
    assert loss.item() == pytest.approx(-math.log(1e-12))


def test_symmetric_distribution_expectation_is_three():
    probs = np.array([[0.1, 0.2, 0.4, 0.2, 0.1]])
    value = expectation_score(Tensor(probs), (1.0, 2.0, 3.0, 4.0, 5.0)).item()
    assert abs(value - 3.0) < 1e-12


def test_expectation_score_checks_rows():
    with pytest.raises(ContractError):
        expectation_score(Tensor([[0.5, 0.6]]), (1.0, 2.0))
    with pytest.raises(DimensionError):
        expectation_score(Tensor([[0.5, 0.5]]), (1.0, 2.0, 3.0))


def test_expectation_loss_modes():
    probs = Tensor([[0.0, 0.0, 1.0, 0.0, 0.0]])
    targets = _targets([4.0], [3])
    pred = Tensor([2.5])
    assert expectation_loss(pred, probs, targets, ComboLossParams()).item() == pytest.approx(0.5)
    gt = ComboLossParams(expectation_mode="groundtruth")
    assert expectation_loss(pred, probs, targets, gt).item() == pytest.approx(1.0)


def test_combo_total_is_weighted_sum(five_class_targets):
    rng = np.random.default_rng(4)
    logits = Tensor(rng.standard_normal((6, 5)))
    pred = Tensor(five_class_targets.scores + rng.normal(0, 0.3, 6))
    params = ComboLossParams()
    total, parts = combo_loss(pred, logits, five_class_targets, params)
    expected = 2.0 * parts["reg"].item() + 1.0 * parts["exp"].item() + 1.0 * parts["cls"].item()
    assert abs(total.item() - expected) < 1e-12
    assert set(parts) == {"reg", "exp", "cls"}


def test_combo_parts_match_standalone_losses(five_class_targets):
    rng = np.random.default_rng(5)
    logits = Tensor(rng.standard_normal((6, 5)))
    pred = Tensor(rng.uniform(1, 5, 6))
    params = ComboLossParams(alpha=0.5, beta=1.5, gamma=0.25)
    _, parts = combo_loss(pred, logits, five_class_targets, params)
    assert parts["reg"].item() == pytest.approx(l1_regression_loss(pred, five_class_targets).item(), rel=1e-14)
    assert parts["cls"].item() == pytest.approx(weighted_cross_entropy(logits, five_class_targets).item(), rel=1e-14)
    exp = expectation_loss(pred, softmax(logits), five_class_targets, params)
    assert parts["exp"].item() == pytest.approx(exp.item(), rel=1e-14)


def test_combo_gradient_reaches_both_heads(five_class_targets):
    rng = np.random.default_rng(6)
    with Tape() as tape:
        logits = tape.watch(Tensor(rng.standard_normal((6, 5))))
        pred = tape.watch(Tensor(rng.uniform(1, 5, 6)))
        total, _ = combo_loss(pred, logits, five_class_targets, ComboLossParams())
        backward(total, tape)
    assert np.abs(logits.grad).sum() > 0
    assert np.abs(pred.grad).sum() > 0


@pytest.mark.parametrize("update", [
    {"alpha": -1.0},
    {"alpha": 0.0, "beta": 0.0, "gamma": 0.0},
    {"class_values": (1.0,)},
    {"class_values": (1.0, 3.0, 2.0)},
    {"expectation_mode": "median"},
])
def test_combo_params_validation(update):
    with pytest.raises(ValidationError):
        ComboLossParams(**update)


def test_batch_targets_validation():
    with pytest.raises(ContractError):
        BatchTargets([1.0, 2.0], [0], [1.0])
    with pytest.raises(ContractError):
        BatchTargets([1.0], [0], [0.0, 1.0])


def test_objective_registry(five_class_targets):
    pred = Tensor(five_class_targets.scores + 0.5)
    logits = Tensor(np.zeros((6, 5)))
    for name in LOSS_NAMES:
        total, parts = objective(name, pred, logits, five_class_targets)
        assert math.isfinite(total.item())
        assert name in TABLE_LABELS
        assert parts
    total, _ = objective("l1", pred, None, five_class_targets)
    assert total.item() == pytest.approx(0.5)
    with pytest.raises(ContractError):
        objective("combo", pred, None, five_class_targets)
    with pytest.raises(ContractError):
        objective("hinge", pred, logits, five_class_targets)


def _random_batch(seed, n=12):
    rng = np.random.default_rng(seed)
    targets = BatchTargets(rng.uniform(1.0, 5.0, n), rng.integers(0, 5, n), rng.uniform(0.5, 3.0, 5))
    return rng.normal(3.0, 1.5, n), rng.normal(0.0, 2.0, (n, 5)), targets


@pytest.mark.parametrize("seed", range(5))
def test_every_loss_is_non_negative(seed):
    pred, logits, targets = _random_batch(seed)
    for name in LOSS_NAMES:
        total, parts = objective(name, Tensor(pred), Tensor(logits), targets)
        assert total.item() >= 0.0
        assert all(part.item() >= 0.0 for part in parts.values())


def test_losses_ignore_batch_order():
    pred, logits, targets = _random_batch(7)
    perm = np.random.default_rng(8).permutation(targets.size)
    shuffled = targets.subset(perm)
    for name in LOSS_NAMES:
        total, _ = objective(name, Tensor(pred), Tensor(logits), targets)
        again, _ = objective(name, Tensor(pred[perm]), Tensor(logits[perm]), shuffled)
        assert again.item() == pytest.approx(total.item(), rel=1e-12, abs=1e-15)


@pytest.mark.parametrize("k", [2.0, 4.0, 0.5])
def test_cross_entropy_is_linear_in_the_weights(k):
    _, logits, targets = _random_batch(9)
    scaled = BatchTargets(targets.scores, targets.classes, targets.class_weights * k)
    base = weighted_cross_entropy(Tensor(logits), targets).item()
    assert weighted_cross_entropy(Tensor(logits), scaled).item() == k * base
