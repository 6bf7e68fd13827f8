import numpy as np
import pytest

import pair_absa.numerics as nx
from pair_absa.config import EncoderConfig
from pair_absa.errors import DimensionError
from pair_absa.gradcheck import grad_check
from pair_absa.numerics import constant
from pair_absa.params import ParamStore
from pair_absa.seq_encoder import SequenceEncoder


def _encoder(**overrides):
    values = dict(d=8, n_heads=2, n_layers=2, ffn_inner_dim=4, dropout_rate=0.0, max_positions=8)
    values.update(overrides)
    store = ParamStore(seed=5)
    return SequenceEncoder(store, EncoderConfig(**values)), store


def _inputs(n, d=8, seed=0):
    return np.random.default_rng(seed).normal(size=(n, d))


def test_shapes_and_attention_rows():
    encoder, _ = _encoder()
    states = encoder.encode_sequence(constant(_inputs(5)))
    assert len(states) == 2
    assert states[-1].S.shape == (5, 8)
    assert states[0].attention.shape == (2, 5, 5)
    np.testing.assert_allclose(states[0].attention.sum(axis=-1), np.ones((2, 5)))


def test_padding_does_not_change_real_positions():
    encoder, _ = _encoder()
    x = _inputs(3)
    padded = np.vstack([x, np.random.default_rng(9).normal(size=(2, 8))])
    plain = encoder.encode_sequence(constant(x))[-1].S.data
    states = encoder.encode_sequence(constant(padded), mask=np.array([True, True, True, False, False]))
    np.testing.assert_allclose(states[-1].S.data[:3], plain, atol=1e-12)
    np.testing.assert_array_equal(states[-1].S.data[3:], np.zeros((2, 8)))
    assert (states[0].attention[:, :, 3:] == 0.0).all()


def test_without_positions_rows_permute_with_inputs():
    encoder, _ = _encoder(use_positions=False)
    x = _inputs(4)
    order = np.array([2, 0, 3, 1])
    out = encoder.encode_sequence(constant(x))[-1].S.data
    permuted = encoder.encode_sequence(constant(x[order]))[-1].S.data
    np.testing.assert_allclose(permuted, out[order], atol=1e-12)


def test_sentence_longer_than_positions():
    encoder, _ = _encoder(max_positions=4)
    with pytest.raises(DimensionError):
        encoder.encode_sequence(constant(_inputs(5)))


def test_mask_length_must_match():
    encoder, _ = _encoder()
    with pytest.raises(DimensionError):
        encoder.encode_sequence(constant(_inputs(3)), mask=np.ones(4, dtype=bool))


def test_dropout_is_reproducible_with_equal_generators():
    encoder, _ = _encoder(dropout_rate=0.5)
    x = constant(_inputs(4))
    a = encoder.encode_sequence(x, training=True, rng=np.random.default_rng(1))[-1].S.data
    b = encoder.encode_sequence(x, training=True, rng=np.random.default_rng(1))[-1].S.data
    c = encoder.encode_sequence(x, training=False)[-1].S.data
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)


def test_interleave_rewrites_each_layer_output():
    encoder, _ = _encoder()
    seen = []

    def interleave(index, before, after):
        seen.append((index, before.shape))
        return nx.scale(after, 0.0)

    states = encoder.encode_sequence(constant(_inputs(3)), interleave=interleave)
    assert seen == [(0, (3, 8)), (1, (3, 8))]
    np.testing.assert_array_equal(states[-1].S.data, np.zeros((3, 8)))


@pytest.mark.parametrize("activation", ["relu", "none"])
def test_encoder_gradients(activation):
    encoder, store = _encoder(ffn_activation=activation)
    x = constant(_inputs(4))
    gold = np.array([0, 3, 5, 7])

    def loss():
        return nx.cross_entropy_rows(encoder.encode_sequence(x)[-1].S, gold)

    report = grad_check(loss, store)
    assert report.passed, report.worst_parameter


def test_single_token_attends_to_itself():
    encoder, _ = _encoder()
    state = encoder.multi_head_attention(encoder.layers[0], constant(_inputs(1)), np.ones(1, dtype=bool))
    np.testing.assert_allclose(state.attention, np.ones((2, 1, 1)))


def test_identical_rows_attend_uniformly():
    encoder, _ = _encoder()
    x = np.tile(_inputs(1), (4, 1))
    state = encoder.multi_head_attention(encoder.layers[0], constant(x), np.ones(4, dtype=bool))
    np.testing.assert_allclose(state.attention, np.full((2, 4, 4), 0.25))


def test_zero_feed_forward_is_layer_norm_of_its_input():
    encoder, _ = _encoder()
    layer = encoder.layers[0]
    for weight in (layer.W1, layer.b1, layer.W2, layer.b2):
        weight.data[...] = 0.0
    a = constant(_inputs(3))
    out = encoder.feed_forward(layer, a)
    expected = nx.layer_norm(a, layer.ln2_gain, layer.ln2_bias, encoder.config.layer_norm_eps)
    np.testing.assert_allclose(out.data, expected.data)
