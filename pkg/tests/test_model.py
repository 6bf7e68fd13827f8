import time

import numpy as np
import pytest

from pair_absa.checks import micro_config, micro_example, micro_model, run_gradcheck
from pair_absa.model import joint_loss, term_head
import pair_absa.numerics as nx
from pair_absa.numerics import Graph, constant
from pair_absa.tagging import DIAG_LABELS, PAIR_LABELS, TagGrid, encode_grid
from pair_absa.training import build_model


def test_forward_shapes(micro):
    model, example, _ = micro_model(micro)
    out = model.forward(example.tokens)
    n = len(example)
    assert out.term_logits.shape == (n, len(DIAG_LABELS))
    assert out.pair_logits.shape == (n * (n - 1) // 2, len(PAIR_LABELS))
    assert out.diag_pola_logits is None
    assert len(out.grid.P) == micro.n_layers
    assert out.grid.P[-1].shape == (n, n, 16)


@pytest.mark.parametrize("mode,channels", [("uni", 4), ("bi", 8), ("quad", 16)])
def test_direction_modes(mode, channels):
    model, example, grid = micro_model(micro_config(directions=mode))
    out = model.forward(example.tokens)
    assert out.grid.P[-1].shape[2] == channels
    assert np.isfinite(model.loss(out, grid).total.item())


def test_loss_is_sum_of_parts(micro):
    model, example, grid = micro_model(micro)
    parts = model.loss(model.forward(example.tokens), grid)
    assert parts.total.item() == pytest.approx(parts.term.item() + parts.pola.item(), abs=1e-12)
    assert parts.pola.item() > 0


def test_without_pair_encoder_polarity_loss_is_zero():
    model, example, grid = micro_model(micro_config(use_pair_encoder=False))
    assert not model.store.names("pair.")
    assert "head.pola.W" not in model.store
    with Graph() as g:
        out = model.forward(example.tokens)
        parts = model.loss(out, grid)
    assert out.pair_logits is None
    assert parts.pola.item() == 0.0
    grads = g.backward(parts.total)
    assert model.store["head.term.W"].node_id in grads
    prediction = model.predict(example)
    assert prediction.triplets == set()


def test_interaction_off_has_no_interaction_weights():
    model, _, _ = micro_model(micro_config(use_interaction=False))
    assert not [n for n in model.store if "interaction" in n]


def test_none_cells_weighted():
    term = constant(np.zeros((3, 5)))
    pair = constant(np.zeros((3, 4)))
    grid = TagGrid.empty(3)
    full = joint_loss(term, pair, grid).pola.item()
    ignored = joint_loss(term, pair, grid, none_weight=0.0).pola.item()
    assert full == pytest.approx(3 * np.log(4.0))
    assert ignored == 0.0


def test_aesc_model_has_diagonal_polarity_head():
    config = micro_config(task="aesc")
    example = micro_example("aesc")
    model = build_model(config, [example])
    out = model.forward(example.tokens)
    assert out.diag_pola_logits.shape == (len(example), len(PAIR_LABELS))
    grid = encode_grid(len(example), example.gold("aesc"), "aesc")
    assert np.isfinite(model.loss(out, grid).total.item())
    prediction = model.predict(example)
    assert prediction.items("aesc") is prediction.pairs


def test_predictions_are_deterministic(micro):
    model, example, _ = micro_model(micro)
    assert model.predict(example) == model.predict(example)


def test_sampled_gradient_check_of_the_joint_loss():
    report = run_gradcheck(max_per_param=3)
    assert report.passed, (report.worst_parameter, report.max_rel_error)
    assert report.max_rel_error <= 1e-4


@pytest.mark.slow
def test_full_gradient_check_of_the_joint_loss():
    report = run_gradcheck(max_per_param=None)
    assert report.passed, (report.worst_parameter, report.max_rel_error)


def test_default_gradient_check_covers_every_parameter_quickly():
    start = time.perf_counter()
    report = run_gradcheck()
    elapsed = time.perf_counter() - start
    assert report.passed, (report.worst_parameter, report.max_rel_error)
    model, _, _ = micro_model()
    assert set(report.per_parameter) == set(model.store.trainable())
    assert elapsed < 60


def test_float32_model_stays_float32():
    model, example, grid = micro_model(micro_config(dtype="float32"))
    out = model.forward(example.tokens)
    assert out.term_logits.dtype == np.float32
    assert out.pair_logits.dtype == np.float32
    assert all(P.dtype == np.float32 for P in out.grid.P)
    assert model.loss(out, grid).total.dtype == np.float32


def test_uniform_logits_loss_at_two_tokens():
    grid = TagGrid.empty(2)
    parts = joint_loss(constant(np.zeros((2, 5))), constant(np.zeros((1, 4))), grid)
    assert parts.total.item() == pytest.approx(2 * np.log(5) + np.log(4))


def _neg_log_softmax(logits, gold):
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    return log_z - shifted[np.arange(len(gold)), gold]


def test_joint_loss_matches_a_brute_force_sum():
    rng = np.random.default_rng(4)
    n = 4
    grid = TagGrid.empty(n)
    grid.diag[:] = [1, 2, 0, 3]
    rows, cols = np.triu_indices(n, k=1)
    grid.pair[rows, cols] = rng.integers(0, 4, size=len(rows))
    term = rng.normal(size=(n, 5))
    pair = rng.normal(size=(len(rows), 4))
    parts = joint_loss(constant(term), constant(pair), grid)
    expected_term = _neg_log_softmax(term, grid.diag).sum()
    expected_pola = _neg_log_softmax(pair, grid.pair[rows, cols]).sum()
    assert parts.term.item() == pytest.approx(expected_term)
    assert parts.pola.item() == pytest.approx(expected_pola)
    assert parts.total.item() == pytest.approx(expected_term + expected_pola)


def test_interaction_changes_the_term_logits():
    with_it, example, _ = micro_model(micro_config(use_interaction=True))
    without, _, _ = micro_model(micro_config(use_interaction=False))
    a = with_it.forward(example.tokens).term_logits.data
    b = without.forward(example.tokens).term_logits.data
    assert a.shape == b.shape
    assert not np.allclose(a, b)


def test_zero_term_head_is_uniform():
    S = constant(np.random.default_rng(1).normal(size=(3, 8)))
    logits = term_head(constant(np.zeros((8, 5))), constant(np.zeros(5)), S)
    np.testing.assert_allclose(nx.softmax(logits).data, np.full((3, 5), 0.2))
