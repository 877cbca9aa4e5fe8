import numpy as np
import numpy.testing as npt
import pytest
from pydantic import ValidationError

from combolab.data import Dataset, split_60_40, synth_generate
from combolab.discretize import DiscretizationSpec
from combolab.errors import ContractError, DivergenceError, ImbalanceError, SampleShapeError
from combolab.losses import LOSS_NAMES
from combolab.model import BackboneConfig, init_parameters
from combolab.train import (
    PUBLISHED_REFERENCE_ROWS,
    MetricsReport,
    MomentumSGD,
    TrainConfig,
    compare_losses,
    cross_validate,
    evaluate,
    fit_model,
    lr_at,
    metrics_from_predictions,
    pearson,
    run_folds,
    sgd_step,
    summarize_folds,
    train_model,
)

SPEC = DiscretizationSpec()


def test_schedule_breakpoints():
    cfg = TrainConfig()
    assert lr_at(0, cfg) == 0.01
    assert lr_at(49, cfg) == 0.01
    assert lr_at(50, cfg) == 0.001
    assert lr_at(100, cfg) == 0.0001
    assert lr_at(199, cfg) == pytest.approx(1e-5, rel=1e-12)
    rates = [lr_at(e, cfg) for e in range(200)]
    assert all(a >= b for a, b in zip(rates, rates[1:]))


@pytest.mark.parametrize("update", [{"lr0": 0.0}, {"momentum": 1.0}, {"batch_size": 0}, {"loss": "hinge"}])
def test_train_config_validation(update):
    with pytest.raises(ValidationError):
        TrainConfig(**update)


def test_sgd_hand_example():
    params, state = sgd_step({"w": np.array(1.0)}, {"w": np.array(0.5)}, {}, lr=0.1, momentum=0.9, weight_decay=0.0)
    assert float(state["w"]) == 0.5
    assert float(params["w"]) == pytest.approx(0.95, abs=1e-15)


def test_sgd_without_momentum_is_vanilla():
    params, _ = sgd_step({"w": np.array([1.0, 2.0])}, {"w": np.array([0.5, -1.0])}, {}, 0.1, 0.0, 0.0)
    npt.assert_allclose(params["w"], [0.95, 2.1])


def test_sgd_two_steps_with_constant_gradient():
    theta, state = {"w": np.array(0.0)}, {}
    drops = []
    for _ in range(2):
        updated, state = sgd_step(theta, {"w": np.array(1.0)}, state, 0.1, 0.9, 0.0)
        drops.append(float(theta["w"] - updated["w"]))
        theta = updated
    npt.assert_allclose(drops, [0.1, 0.19], atol=1e-15)


def test_sgd_zero_gradient_is_identity_and_decay_shrinks():
    theta = {"w": np.array([1.5, -2.0])}
    same, _ = sgd_step(theta, {"w": np.zeros(2)}, {}, 0.1, 0.9, 0.0)
    assert np.array_equal(same["w"], theta["w"])
    decayed, _ = sgd_step(theta, {"w": np.zeros(2)}, {}, 0.1, 0.9, 0.01)
    assert np.all(np.abs(decayed["w"]) < np.abs(theta["w"]))


def test_sgd_nan_gradient_names_the_parameter():
    with pytest.raises(DivergenceError) as info:
        sgd_step({"head.reg.bias": np.zeros(1)}, {"head.reg.bias": np.array([np.nan])}, {}, 0.1, 0.9, 0.0,
                 step=7, loss=1.25)
    assert info.value.parameter == "head.reg.bias"
    assert info.value.step == 7


def test_momentum_sgd_updates_in_place(tiny_backbone):
    params = init_parameters(tiny_backbone.with_input_shape((6,)))
    before = params["head.reg.bias"].copy()
    grads = {name: np.ones_like(arr) for name, arr in params.tensors.items()}
    optimizer = MomentumSGD(momentum=0.9, weight_decay=0.0)
    optimizer.step(params, grads, lr=0.1)
    npt.assert_allclose(params["head.reg.bias"], before - 0.1)
    assert optimizer.steps == 1


def test_metrics_exact_predictions():
    s = np.array([1.0, 2.5, 4.0, 3.0])
    report = metrics_from_predictions(s, s)
    assert (report.mae, report.rmse) == (0.0, 0.0)
    assert report.pc == pytest.approx(1.0)
    assert report.pc_defined


def test_metrics_anticorrelated():
    s = np.array([-1.0, 0.5, 2.0, -1.5])
    assert metrics_from_predictions(-s, s).pc == pytest.approx(-1.0)
    assert pearson(s, -s + 7.0) == pytest.approx(-1.0)


def test_metrics_match_direct_formulas():
    rng = np.random.default_rng(8)
    pred, truth = rng.standard_normal(1000), rng.standard_normal(1000)
    report = metrics_from_predictions(pred, truth)
    mae = sum(abs(p - t) for p, t in zip(pred, truth)) / 1000
    rmse = np.sqrt(sum((p - t) ** 2 for p, t in zip(pred, truth)) / 1000)
    mp, mt = pred.mean(), truth.mean()
    pc = sum((p - mp) * (t - mt) for p, t in zip(pred, truth)) / np.sqrt(
        sum((p - mp) ** 2 for p in pred) * sum((t - mt) ** 2 for t in truth))
    assert abs(report.mae - mae) < 1e-12
    assert abs(report.rmse - rmse) < 1e-12
    assert abs(report.pc - pc) < 1e-12
    assert report.mae <= report.rmse


def test_metrics_zero_variance_flags_pc():
    report = metrics_from_predictions(np.full(5, 3.0), np.arange(5.0))
    assert report.pc is None
    assert not report.pc_defined
    assert report.to_dict()["pc"] is None


def test_fold_summary_is_arithmetic_mean():
    folds = [MetricsReport(0.1, 0.2, 0.9, 10), MetricsReport(0.3, 0.4, None, 10), MetricsReport(0.2, 0.3, 0.7, 10)]
    summary = summarize_folds(folds)
    assert abs(summary.mae - 0.2) < 1e-12
    assert abs(summary.rmse - 0.3) < 1e-12
    assert abs(summary.pc - 0.8) < 1e-12
    assert len(summary.per_fold) == 3


def test_zero_epochs_returns_initial_parameters(small_dataset, tiny_backbone, quick_train):
    params, history = train_model(small_dataset, SPEC, tiny_backbone, quick_train.model_copy(update={"epochs": 0}))
    init = init_parameters(tiny_backbone.with_input_shape((6,)))
    assert history == []
    for name in init.names():
        assert np.array_equal(params[name], init[name])


def test_training_is_deterministic(small_dataset, tiny_backbone, quick_train):
    _, first = train_model(small_dataset, SPEC, tiny_backbone, quick_train)
    _, second = train_model(small_dataset, SPEC, tiny_backbone, quick_train)
    assert [r.to_record() for r in first] == [r.to_record() for r in second]
    assert len(first) == 3
    assert set(first[0].parts) == {"reg", "exp", "cls"}
    assert first[0].lr == 0.01


def test_every_loss_trains(small_dataset, tiny_backbone, quick_train):
    for name in ("mse", "l1", "smooth_l1", "huber"):
        _, history = train_model(small_dataset, SPEC, tiny_backbone, quick_train.model_copy(update={"loss": name}))
        assert list(history[0].parts) == [name]


def test_empty_class_fails_before_training(tiny_backbone, quick_train):
    ds = Dataset(np.random.default_rng(0).standard_normal((12, 6)), np.full(12, 3.0),
                 tuple(str(i) for i in range(12)), "synthetic")
    with pytest.raises(ImbalanceError) as info:
        train_model(ds, SPEC, tiny_backbone, quick_train)
    assert info.value.empty_class == 0


def test_combo_needs_dual_head(small_dataset, quick_train):
    with pytest.raises(ContractError):
        train_model(small_dataset, SPEC, BackboneConfig(stage_widths=(4,), dual_head=False), quick_train)


def test_divergence_is_reported(small_dataset, tiny_backbone, quick_train):
    wild = quick_train.model_copy(update={"lr0": 1e200, "loss": "mse"})
    with pytest.raises((DivergenceError, ArithmeticError)):
        train_model(small_dataset, SPEC, tiny_backbone, wild)


def test_train_then_evaluate_on_training_set(small_dataset, tiny_backbone, quick_train):
    result = fit_model(small_dataset, SPEC, tiny_backbone, quick_train)
    report = evaluate(result.params, result.forward, small_dataset)
    again = evaluate(result.params, None, small_dataset)
    assert report == again
    assert report.mae <= report.rmse


def test_cross_validation_shapes(small_dataset, tiny_backbone, quick_train):
    with pytest.raises(ContractError):
        cross_validate(small_dataset, 1, SPEC, tiny_backbone, quick_train)
    outcomes = run_folds(small_dataset, 3, SPEC, tiny_backbone, quick_train, seed=2, threads=1)
    assert [o.fold for o in outcomes] == [0, 1, 2]
    assert sum(o.test_size for o in outcomes) == len(small_dataset)
    summary = cross_validate(small_dataset, 3, SPEC, tiny_backbone, quick_train, seed=2, threads=1)
    assert len(summary.per_fold) == 3
    assert abs(summary.mae - np.mean([o.metrics.mae for o in outcomes])) < 1e-12


def test_cross_validation_threads_do_not_change_results(small_dataset, tiny_backbone, quick_train):
    serial = cross_validate(small_dataset, 3, SPEC, tiny_backbone, quick_train, seed=2, threads=1)
    parallel = cross_validate(small_dataset, 3, SPEC, tiny_backbone, quick_train, seed=2, threads=3)
    assert serial == parallel


def test_compare_losses_rows(small_dataset, tiny_backbone, quick_train):
    rows = compare_losses(small_dataset, ["mse", "l1", "smooth_l1", "huber", "combo"], SPEC, tiny_backbone,
                          quick_train.model_copy(update={"epochs": 2}), seed=4, threads=1)
    assert [r.loss for r in rows] == ["mse", "l1", "smooth_l1", "huber", "combo"]
    _, test = split_60_40(len(small_dataset), 4)
    assert all(r.metrics.n == len(test) for r in rows)
    assert rows[-1].label == "ComboLoss"
    with pytest.raises(ContractError) as info:
        compare_losses(small_dataset, ["mse", "hinge"], SPEC, tiny_backbone, quick_train)
    assert "smooth_l1" in str(info.value)


def test_published_rows_are_documented():
    assert PUBLISHED_REFERENCE_ROWS["combo"] == (0.2126, 0.2813, 0.9117)
    assert PUBLISHED_REFERENCE_ROWS["mse"] == (0.2195, 0.2947, 0.9008)


@pytest.fixture(scope="module")
def convergence_data():
    ds = synth_generate(500, (16,), 0.1, seed=0)
    return ds, split_60_40(len(ds), seed=0)


def converge(convergence_data, loss):
    ds, (train_idx, test_idx) = convergence_data
    cfg = TrainConfig(epochs=200, seed=0, loss=loss, log_every=50)
    result = fit_model(ds, SPEC, BackboneConfig(stage_widths=(64, 32), seed=0), cfg, train_idx)
    return result, evaluate(result.params, result.forward, ds, test_idx)


@pytest.mark.slow
def test_combo_training_reaches_held_out_correlation(convergence_data):
    result, held_out = converge(convergence_data, "combo")
    assert held_out.pc >= 0.90
    assert result.history[-1].loss < 0.25 * result.history[0].loss


@pytest.mark.slow
@pytest.mark.parametrize("loss", ["mse", "l1", "smooth_l1", "huber", "combo"])
def test_every_loss_cuts_training_loss_below_a_quarter(convergence_data, loss):
    result, _ = converge(convergence_data, loss)
    assert result.history[0].epoch == 0 and result.history[-1].epoch == 199
    assert result.history[-1].loss < 0.25 * result.history[0].loss


def test_compare_losses_start_from_one_initialisation(small_dataset, tiny_backbone, quick_train):
    rows = compare_losses(small_dataset, list(LOSS_NAMES), SPEC, tiny_backbone,
                          quick_train.model_copy(update={"epochs": 0}), seed=4, threads=2)
    first = rows[0].params
    trunk = [name for name in first.names() if name.startswith("stage")]
    assert trunk
    for row in rows[1:]:
        assert row.params.names() == first.names()
        for name in first.names():
            assert row.params[name].tobytes() == first[name].tobytes()


def test_sample_shape_mismatch_is_a_data_error(small_dataset, tiny_backbone, quick_train):
    wrong = tiny_backbone.with_input_shape((5,))
    with pytest.raises(SampleShapeError) as info:
        train_model(small_dataset, SPEC, wrong, quick_train)
    assert info.value.exit_code == 3
    params = init_parameters(wrong)
    with pytest.raises(SampleShapeError):
        evaluate(params, None, small_dataset)
