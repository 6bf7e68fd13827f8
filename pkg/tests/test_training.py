import time

import numpy as np
import pandas as pd
import pytest

from pair_absa.checks import micro_config
from pair_absa.config import build_config
from pair_absa.data import parse_dataset, parse_line
from pair_absa.errors import NumericError
from pair_absa.training import (
    LOG_COLUMNS,
    TrainState,
    build_model,
    clip_global_norm,
    encode_examples,
    evaluate,
    learning_rate,
    optimizer_step,
    train,
)


def test_inverse_time_decay():
    config = build_config()
    assert learning_rate(0, config) == pytest.approx(1e-3)
    assert learning_rate(1000, config) == pytest.approx(1e-3 / 1.05)


def test_exponential_decay():
    config = build_config(lr_schedule="exponential")
    assert learning_rate(2000, config) == pytest.approx(1e-3 * 0.95**2)


def test_clip_global_norm():
    grads = {"a": np.array([3.0, 0.0]), "b": np.array([[4.0]])}
    norm = clip_global_norm(grads, 1.0)
    assert norm == pytest.approx(5.0)
    assert np.sqrt(sum((g**2).sum() for g in grads.values())) == pytest.approx(1.0)
    untouched = {"a": np.array([0.3])}
    clip_global_norm(untouched, 1.0)
    assert untouched["a"][0] == pytest.approx(0.3)


def test_non_finite_gradient_names_the_parameter(toy_train):
    model = build_model(micro_config(max_positions=32), toy_train)
    state = TrainState.init(model.store, model.config)
    model.store.grads["head.term.b"][0] = np.nan
    with pytest.raises(NumericError) as info:
        optimizer_step(model.store, state, model.config)
    assert info.value.parameter == "head.term.b"


def test_adam_moves_parameters_against_the_gradient(toy_train):
    model = build_model(micro_config(max_positions=32), toy_train)
    state = TrainState.init(model.store, model.config)
    before = model.store["head.term.b"].data.copy()
    model.store.grads["head.term.b"][...] = 1.0
    optimizer_step(model.store, state, model.config)
    assert state.step == 1
    np.testing.assert_allclose(model.store["head.term.b"].data, before - model.config.learning_rate, rtol=1e-6)


def test_conflicting_examples_are_skipped_and_counted():
    good = parse_line("good food####[([1], [0], 'POS')]")
    bad = parse_line("a b c####[([0, 1], [2], 'POS'), ([1], [2], 'NEG')]", line_no=2)
    encoded, skipped = encode_examples([good, bad], "aste")
    assert [ex.id for ex, _ in encoded] == [good.id]
    assert skipped == 1


def test_zero_steps_returns_the_initial_model(tiny, toy_train):
    config = tiny.model_copy(update={"max_steps": 0})
    model = build_model(config, toy_train)
    before = model.store.state_dict()
    result = train(model, toy_train)
    assert result.log.empty
    assert list(result.log.columns) == LOG_COLUMNS
    for name, value in model.store.state_dict().items():
        np.testing.assert_array_equal(value, before[name])


def _run(config, train_set, dev_set=()):
    model = build_model(config, train_set, extra=dev_set)
    return train(model, train_set, dev_set), model


def test_equal_seeds_give_identical_runs(tiny, toy_train, toy_dev):
    config = tiny.model_copy(update={"epochs": 2, "batch_size": 4, "dropout": 0.3})
    first, model_a = _run(config, toy_train[:4], toy_dev)
    second, model_b = _run(config, toy_train[:4], toy_dev)
    pd.testing.assert_frame_equal(first.log, second.log)
    assert evaluate(model_a, toy_dev) == evaluate(model_b, toy_dev)
    assert len(first.log) == 2
    assert np.isfinite(first.log["dev_f1"].iloc[-1])


def test_best_dev_parameters_are_restored(tiny, toy_train, toy_dev):
    config = tiny.model_copy(update={"epochs": 3, "batch_size": 8})
    result, model = _run(config, toy_train[:4], toy_dev)
    assert result.best_epoch in (1, 2, 3)
    assert evaluate(model, toy_dev).main.f1 == pytest.approx(result.state.best_dev)


@pytest.mark.parametrize("mode", ["uni", "bi", "quad"])
def test_every_direction_mode_trains(tiny, toy_train, mode):
    config = tiny.model_copy(update={"directions": mode, "max_steps": 1, "batch_size": 2})
    result, _ = _run(config, toy_train)
    assert len(result.log) == 1
    assert np.isfinite(result.log["loss"].iloc[0])


def test_no_pair_encoder_reports_empty_triplet_predictions(toy_train):
    config = micro_config(use_pair_encoder=False, max_positions=32, max_steps=1, batch_size=2)
    result, model = _run(config, toy_train)
    assert (result.log["loss_pola"] == 0.0).all()
    report = evaluate(model, toy_train)
    assert report.main.n_pred == 0
    assert report.main.f1 == 0.0


def test_evaluation_reports_breakdown(tiny, toy_dev):
    model = build_model(tiny, toy_dev)
    report = evaluate(model, toy_dev)
    assert list(report.metrics) == ["AE", "OE", "ASTE"]
    assert report.main.n_gold == 4


@pytest.mark.slow
def test_overfits_the_toy_corpus(data_dir):
    config = build_config(data_dir / "config.txt")
    train_set = parse_dataset(data_dir / "train.txt")
    model = build_model(config, train_set)
    hit = []

    def stop_when_perfect(epoch, summary):
        if evaluate(model, train_set).main.f1 == 1.0:
            hit.append(epoch)
            return True
        return False

    start = time.perf_counter()
    result = train(model, train_set, on_epoch=stop_when_perfect)
    assert hit, "training triplet F1 never reached 1.0"
    assert result.log["epoch"].max() == hit[0]
    assert evaluate(model, train_set).main.f1 == 1.0
    assert time.perf_counter() - start < 300


def test_on_epoch_can_stop_training(tiny, toy_train):
    seen = []

    def stop_after_two(epoch, summary):
        seen.append(epoch)
        return epoch == 2

    result = train(build_model(tiny.model_copy(update={"epochs": 10}), toy_train), toy_train, on_epoch=stop_after_two)
    assert seen == [1, 2]
    assert result.log["epoch"].max() == 2


def test_ten_step_smoke_run_reduces_the_loss(toy_train):
    config = micro_config(n_layers=1, directions="bi", max_positions=32, batch_size=8, epochs=10, learning_rate=0.01)
    result = train(build_model(config, toy_train), toy_train)
    losses = result.log["loss"].to_numpy()
    assert len(losses) == 10
    assert np.all(np.isfinite(losses))
    assert losses[-1] < losses[0]
