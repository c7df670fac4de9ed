import numpy as np
import pytest

from helpers import balanced_batch, is_density, random_instance
from qksttn import encoding, oracle, training, ttn
from qksttn.encoding import EncodingParams
from qksttn.errors import CapacityError


def test_identity_model_pure_zero():
    enc = EncodingParams(np.zeros((4, 1)), np.zeros(4), np.ones((4, 1), bool), 1.0)
    model = ttn.identity_ttn(ttn.build_topology(4, 2))
    assert np.allclose(oracle.dense_simulate(enc, model, np.zeros(1)), np.diag([1.0, 0]))


@pytest.mark.parametrize("E,chi", [(2, 2), (4, 2), (8, 2), (4, 4), (8, 4)])
def test_agreement_with_contract(E, chi, rng):
    for _ in range(5):
        enc, model = random_instance(E, chi, rng, tied=bool(rng.integers(2)))
        x = rng.random(enc.p)
        dense = oracle.dense_simulate(enc, model, x)
        assert is_density(dense)
        fast = ttn.contract(model, encoding.leaf_states(enc, x, chi))
        assert np.max(np.abs(dense - fast)) <= 1e-10


@pytest.mark.parametrize("E,chi", [(4, 2), (8, 4)])
def test_objective_agrees(E, chi, rng):
    enc, model = random_instance(E, chi, rng)
    batch = balanced_batch(8, enc.p, 2, rng)
    f, _ = training.objective_batch(model, enc, batch)
    assert abs(f - oracle.dense_objective(enc, model, batch)) <= 1e-10


def _router():
    enc = EncodingParams(np.array([[np.pi], [0.0]]), np.zeros(2), np.ones((2, 1), bool), 1.0)
    return enc, ttn.identity_ttn(ttn.build_topology(2, 2))


def test_perfect_routing():
    enc, model = _router()
    batch = (np.array([[0.0], [1.0], [0.0], [1.0]]), np.array([0, 1, 0, 1]))
    assert np.isclose(oracle.dense_objective(enc, model, batch), 1.0)


def test_identical_inputs_give_zero():
    enc, model = _router()
    batch = (np.array([[0.3], [0.3]]), np.array([0, 1]))
    assert abs(oracle.dense_objective(enc, model, batch)) <= 1e-12


def test_capacity_cap(rng):
    enc, model = random_instance(16, 2, rng)
    with pytest.raises(CapacityError):
        oracle.dense_simulate(enc, model, rng.random(enc.p))
