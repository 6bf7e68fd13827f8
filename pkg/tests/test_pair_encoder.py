import numpy as np
import pytest

import pair_absa.numerics as nx
from pair_absa.checks import micro_config, run_mdgru_equivalence, run_worker_invariance
from pair_absa.errors import ConfigError, DimensionError
from pair_absa.gradcheck import grad_check
from pair_absa.numerics import Graph, constant
from pair_absa.pair_encoder import (
    DIRECTION_FLIPS,
    GRUCellParams,
    PairEncoder,
    PairInitParams,
    anti_diagonals,
    interaction,
    mdgru_forward,
    mdgru_multi,
    mdgru_reference,
    pair_init,
    wavefront_schedule,
)
from pair_absa.params import ParamStore


def _cells(k=4, d_pair=5, hidden=3, seed=0):
    store = ParamStore(seed=seed)
    return [GRUCellParams.create(store, f"cell{c}", d_pair, hidden) for c in range(k)], store


def _grid(n, d=5, seed=0):
    return np.random.default_rng(seed).normal(size=(n, n, d))


def test_anti_diagonals():
    assert anti_diagonals(3) == [
        [(0, 0)],
        [(0, 1), (1, 0)],
        [(0, 2), (1, 1), (2, 0)],
        [(1, 2), (2, 1)],
        [(2, 2)],
    ]


def test_single_worker_plan_is_row_major():
    plan = wavefront_schedule(3, 1)
    assert plan.order() == [(i, j) for i in range(3) for j in range(3)]


@pytest.mark.parametrize("n,workers", [(1, 4), (5, 2), (6, 4), (7, 3)])
def test_wavefront_plan_respects_dependencies(n, workers):
    plan = wavefront_schedule(n, workers)
    stage_of = {}
    for s, stage in enumerate(plan.stages):
        assert len(stage) <= workers
        for chunk in stage:
            for cell in chunk:
                assert cell not in stage_of
                stage_of[cell] = s
    assert len(stage_of) == n * n
    for (i, j), s in stage_of.items():
        if i > 0:
            assert stage_of[(i - 1, j)] < s
        if j > 0:
            assert stage_of[(i, j - 1)] < s
    assert plan.diagonal_sizes == [len(d) for d in anti_diagonals(n)]


@pytest.mark.parametrize("n,workers", [(0, 1), (3, 0)])
def test_invalid_plans(n, workers):
    with pytest.raises(ConfigError):
        wavefront_schedule(n, workers)


@pytest.mark.parametrize("direction", list(DIRECTION_FLIPS))
@pytest.mark.parametrize("workers", [0, 1, 3])
def test_scan_matches_reference_loop(direction, workers):
    (cell, *_), _ = _cells(k=1)
    for n in (1, 2, 4):
        S_prime = _grid(n, seed=n)
        P_prev = np.random.default_rng(n + 10).normal(size=(n, n, 3))
        got = mdgru_forward(cell, constant(S_prime), constant(P_prev), direction, workers).data
        np.testing.assert_allclose(got, mdgru_reference(cell, S_prime, P_prev, direction), atol=1e-12)


def test_reverse_scan_is_flipped_forward_scan():
    (cell, *_), _ = _cells(k=1)
    S_prime = _grid(4)
    nw = mdgru_forward(cell, constant(S_prime), None, "nw").data
    se_of_flipped = mdgru_forward(cell, constant(S_prime[::-1, ::-1].copy()), None, "se").data
    np.testing.assert_allclose(nw, se_of_flipped[::-1, ::-1], atol=1e-12)


def test_top_left_cell_sees_only_its_input():
    (cell, *_), _ = _cells(k=1)
    S_prime = _grid(3)
    changed = S_prime.copy()
    changed[2, 2] += 1.0
    a = mdgru_forward(cell, constant(S_prime), None, "se").data
    b = mdgru_forward(cell, constant(changed), None, "se").data
    np.testing.assert_allclose(a[:2, :2], b[:2, :2], atol=1e-15)
    assert not np.allclose(a[2, 2], b[2, 2])


def test_mode_channel_counts_and_bi_prefix():
    cells, _ = _cells(k=4)
    S_prime = constant(_grid(4))
    uni = mdgru_multi(cells[:1], S_prime, None, "uni").data
    bi = mdgru_multi(cells[:2], S_prime, None, "bi").data
    quad = mdgru_multi(cells, S_prime, None, "quad").data
    assert (uni.shape[2], bi.shape[2], quad.shape[2]) == (3, 6, 12)
    np.testing.assert_array_equal(bi[:, :, :3], uni)


def test_mode_needs_one_cell_per_direction():
    cells, _ = _cells(k=2)
    with pytest.raises(ConfigError):
        mdgru_multi(cells, constant(_grid(2)), None, "quad")


def test_previous_layer_shape_is_checked():
    (cell, *_), _ = _cells(k=1)
    with pytest.raises(DimensionError):
        mdgru_forward(cell, constant(_grid(3)), constant(np.zeros((3, 3, 4))), "se")


def test_pair_init_reads_both_tokens():
    store = ParamStore(seed=2)
    params = PairInitParams.create(store, "init", 4, 6)
    S = np.random.default_rng(0).normal(size=(3, 4))
    grid = pair_init(params, constant(S)).data
    concat_w = np.vstack([params.W_left.data, params.W_right.data])
    expected = np.maximum(np.maximum(np.concatenate([S[1], S[2]]) @ concat_w + params.b1.data, 0) @ params.W2.data + params.b2.data, 0)
    assert grid.shape == (3, 3, 6)
    np.testing.assert_allclose(grid[1, 2], expected, atol=1e-12)


def test_interaction_pools_over_the_upper_triangle():
    store = ParamStore(seed=4)
    W = store.create("W", (2, 3))
    P = np.random.default_rng(1).normal(size=(3, 3, 2))
    S = np.zeros((3, 3))
    out = interaction(W, constant(P), constant(S)).data
    np.testing.assert_allclose(out[2], P[2, 2] @ W.data)
    np.testing.assert_allclose(out[0], (P[0] @ W.data).max(axis=0))
    assert interaction(None, constant(P), constant(S)).data is S


def test_gradients_do_not_depend_on_worker_count():
    (cell, *_), store = _cells(k=1)
    S_prime = constant(_grid(4))
    grads = []
    for workers in (0, 1, 2):
        with Graph() as g:
            loss = nx.reduce_sum(nx.tanh(mdgru_forward(cell, S_prime, None, "sw", workers)))
        grads.append(g.backward(loss)[cell.Uc.node_id])
    np.testing.assert_allclose(grads[1], grads[0], atol=1e-12)
    np.testing.assert_allclose(grads[2], grads[0], atol=1e-12)


def test_scan_gradient_check():
    cells, store = _cells(k=2, d_pair=3, hidden=2)
    S_prime = constant(_grid(3, d=3))
    P_prev = constant(np.random.default_rng(3).normal(size=(3, 3, 4)))

    def loss():
        return nx.reduce_sum(nx.mul(mdgru_multi(cells, S_prime, P_prev, "bi"), mdgru_multi(cells, S_prime, P_prev, "bi")))

    assert grad_check(loss, store).passed


def test_shared_direction_weights():
    config = micro_config(n_layers=1)
    own = PairEncoder(ParamStore(), config)
    shared = PairEncoder(ParamStore(), micro_config(n_layers=1, share_direction_weights=True))
    assert len({id(c) for c in own.cells[0]}) == 4
    assert len({id(c) for c in shared.cells[0]}) == 1
    assert own.channels == shared.channels == 16


def test_equivalence_suite_passes_on_small_grids():
    report = run_mdgru_equivalence(sizes=range(1, 5), seeds=3)
    assert report.passed, report.worst_case
    assert report.cases == 4 * 3 * 4 * 3


def test_worker_count_invariance_at_64():
    assert run_worker_invariance(n=64) <= 1e-12


@pytest.mark.parametrize("direction", ["se", "nw"])
def test_zero_input_is_a_fixed_point_of_the_scan(direction):
    (cell,), _ = _cells(k=1, d_pair=5, hidden=3, seed=8)
    assert not np.any(cell.Wx.data == 0)
    out = mdgru_forward(cell, constant(np.zeros((4, 4, 5))), None, direction)
    np.testing.assert_array_equal(out.data, np.zeros((4, 4, 3)))
