import numpy as np
import pytest

from pair_absa.errors import ConfigError, DimensionError
from pair_absa.params import ParamStore, Rng


def test_child_streams_are_reproducible_and_independent():
    a = Rng(7).child("dropout").generator().random(5)
    b = Rng(7).child("dropout").generator().random(5)
    c = Rng(7).child("shuffle").generator().random(5)
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)


def test_create_is_independent_of_registration_order():
    first = ParamStore(seed=1)
    first.create("a", (2, 3))
    first.create("b", (3,), init="normal")
    second = ParamStore(seed=1)
    second.create("b", (3,), init="normal")
    second.create("a", (2, 3))
    np.testing.assert_array_equal(first["a"].data, second["a"].data)
    np.testing.assert_array_equal(first["b"].data, second["b"].data)


def test_duplicate_names_rejected():
    store = ParamStore()
    store.create("w", (2,))
    with pytest.raises(ConfigError):
        store.create("w", (2,))


def test_unknown_initialiser():
    with pytest.raises(ConfigError):
        ParamStore().create("w", (2,), init="orthogonal")


def test_frozen_parameters_are_not_trainable_and_get_no_gradient():
    store = ParamStore()
    frozen = store.add("table", np.ones((2, 2)), frozen=True)
    w = store.create("w", (2,))
    assert store.trainable() == ["w"]
    assert store.size() == 2
    assert store.size(trainable_only=False) == 6
    store.accumulate({w.node_id: np.ones(2)}, weight=0.5)
    np.testing.assert_array_equal(store.grads["w"], [0.5, 0.5])
    assert frozen.node_id is None
    np.testing.assert_array_equal(store.grads["table"], np.zeros((2, 2)))


def test_state_dict_round_trip_and_shape_check():
    store = ParamStore(seed=2)
    store.create("w", (2, 2))
    state = store.state_dict()
    store["w"].data[...] = 0.0
    store.load_state_dict(state)
    np.testing.assert_array_equal(store["w"].data, state["w"])
    with pytest.raises(DimensionError):
        store.load_state_dict({"w": np.zeros((3, 2))})
    with pytest.raises(DimensionError):
        store.load_state_dict({})
