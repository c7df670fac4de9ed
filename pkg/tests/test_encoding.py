import numpy as np
import pytest

from qksttn import encoding
from qksttn.encoding import EXACT, EncodingParams
from qksttn.errors import ConfigError, DomainError


class TestInitEncoding:
    def test_dense_when_r_equals_p(self, rng):
        enc = encoding.init_encoding(8, 5, 5, 0.1, rng)
        assert enc.mask.all()

    def test_exact_nonzeros_per_row(self, rng):
        enc = encoding.init_encoding(512, 784, 392, 0.1, rng)
        assert np.all(enc.nonzeros == 392)
        assert enc.E * (392 + 1) == 201_216
        assert np.all(enc.omega[~enc.mask] == 0)

    def test_deterministic(self):
        a = encoding.init_encoding(16, 20, 7, 0.3, np.random.default_rng(5))
        b = encoding.init_encoding(16, 20, 7, 0.3, np.random.default_rng(5))
        assert np.array_equal(a.omega, b.omega) and np.array_equal(a.beta, b.beta)
        assert np.array_equal(a.mask, b.mask)

    def test_distributions(self):
        enc = encoding.init_encoding(2000, 50, 50, 0.3, np.random.default_rng(0))
        assert abs(enc.omega.std() - 0.3) < 0.005
        assert enc.beta.min() >= 0 and enc.beta.max() < 2 * np.pi
        assert abs(enc.beta.mean() - np.pi) < 0.1

    def test_mask_positions_uniform(self):
        enc = encoding.init_encoding(4000, 10, 3, 0.1, np.random.default_rng(1))
        freq = enc.mask.mean(axis=0)
        assert np.allclose(freq, 0.3, atol=0.03)

    @pytest.mark.parametrize("r", [0, 6])
    def test_bad_r(self, r, rng):
        with pytest.raises(ConfigError):
            encoding.init_encoding(4, 5, r, 0.1, rng)

    def test_mask_violation_rejected(self):
        with pytest.raises(ConfigError):
            EncodingParams(np.ones((2, 2)), np.zeros(2), np.eye(2, dtype=bool), 0.1)


class TestAngles:
    def test_zero_omega(self, rng):
        enc = EncodingParams(np.zeros((3, 4)), np.array([0.1, 0.2, 0.3]), np.ones((3, 4), bool), 0.1)
        assert np.array_equal(encoding.angles(enc, rng.random(4)), enc.beta)

    def test_unit_vector(self, rng):
        enc = encoding.init_encoding(6, 4, 4, 1.0, rng)
        assert np.allclose(encoding.angles(enc, np.eye(4)[2]), enc.omega[:, 2] + enc.beta)

    def test_double_loop_oracle(self, rng):
        enc = encoding.init_encoding(7, 9, 5, 1.0, rng)
        x = rng.random(9)
        expected = [sum(enc.omega[e, i] * x[i] for i in range(9)) + enc.beta[e] for e in range(7)]
        assert np.max(np.abs(encoding.angles(enc, x) - expected)) <= 1e-12

    def test_batch(self, rng):
        enc = encoding.init_encoding(7, 9, 5, 1.0, rng)
        X = rng.random((3, 9))
        assert np.allclose(encoding.angles(enc, X)[1], encoding.angles(enc, X[1]))

    def test_length_mismatch(self, rng):
        enc = encoding.init_encoding(2, 3, 3, 1.0, rng)
        with pytest.raises(DomainError):
            encoding.angles(enc, np.zeros(4))


class TestEpisodeState:
    @pytest.mark.parametrize("theta,expected", [
        (0.0, [[1, 0], [0, 0]]),
        (np.pi, [[0, 0], [0, 1]]),
        (np.pi / 2, [[0.5, 0.5], [0.5, 0.5]]),
    ])
    def test_analytic(self, theta, expected):
        assert np.allclose(encoding.episode_state(theta), expected, atol=1e-15)

    def test_matches_rotation(self, rng):
        for theta in rng.uniform(-10, 10, size=5):
            ry = np.array([[np.cos(theta / 2), -np.sin(theta / 2)],
                           [np.sin(theta / 2), np.cos(theta / 2)]])
            psi = ry @ [1.0, 0.0]
            assert np.allclose(encoding.episode_state(theta), np.outer(psi, psi), atol=1e-14)

    def test_derivative_at_zero(self):
        assert np.allclose(encoding.episode_state_derivative(0.0), [[0, 0.5], [0.5, 0]])

    def test_derivative_finite_difference(self, rng):
        h = 1e-6
        for theta in rng.uniform(-4, 4, size=10):
            fd = (encoding.episode_state(theta + h) - encoding.episode_state(theta - h)) / (2 * h)
            d = encoding.episode_state_derivative(theta)
            assert np.max(np.abs(fd - d)) <= 1e-8
            assert abs(np.trace(d)) < 1e-15


class TestLeafStates:
    def test_chi2_one_leaf_per_episode(self, rng):
        enc = encoding.init_encoding(4, 3, 3, 1.0, rng)
        assert encoding.leaf_states(enc, rng.random(3), 2).shape == (4, 2, 2)

    def test_chi4_analytic(self):
        enc = EncodingParams(np.zeros((4, 1)), np.array([0, np.pi, 0, 0]), np.ones((4, 1), bool), 1.0)
        leaves = encoding.leaf_states(enc, np.zeros(1), 4)
        assert np.allclose(leaves[0], np.diag([0, 1, 0, 0]), atol=1e-15)
        assert np.allclose(leaves[1], np.diag([1, 0, 0, 0]), atol=1e-15)

    def test_chi4_is_kron_of_pairs(self, rng):
        enc = encoding.init_encoding(6, 3, 3, 1.0, rng)
        x = rng.random(3)
        states = encoding.episode_state(encoding.angles(enc, x))
        leaves = encoding.leaf_states(enc, x, 4)
        for k in range(3):
            assert np.allclose(leaves[k], np.kron(states[2 * k], states[2 * k + 1]))

    def test_odd_episodes_rejected(self, rng):
        enc = encoding.init_encoding(3, 2, 2, 1.0, rng)
        with pytest.raises(ConfigError):
            encoding.leaf_states(enc, np.zeros(2), 4)

    def test_bad_chi(self, rng):
        enc = encoding.init_encoding(4, 2, 2, 1.0, rng)
        with pytest.raises(ConfigError):
            encoding.leaf_states(enc, np.zeros(2), 3)


class TestSampleOutcomes:
    def test_pure_zero(self, rng):
        rho = np.diag([1.0, 0.0])
        assert np.array_equal(encoding.sample_outcomes(rho, 17, rng), [1.0, 0.0])
        assert np.array_equal(encoding.sample_outcomes(rho, EXACT), [1.0, 0.0])

    def test_exact_half(self):
        assert np.allclose(encoding.sample_outcomes(encoding.episode_state(np.pi / 2), EXACT), 0.5)

    def test_binomial_concentration(self):
        shots = 100_000
        rho = encoding.episode_state(1.1)
        p = rho[0, 0]
        bound = 3 * np.sqrt(p * (1 - p) / shots)
        inside = sum(abs(encoding.sample_outcomes(rho, shots, np.random.default_rng(s))[0] - p) <= bound
                     for s in range(200))
        assert inside / 200 >= 0.99

    def test_sums_to_one(self, rng):
        freq = encoding.sample_outcomes(np.eye(4) / 4, 13, rng)
        assert np.isclose(freq.sum(), 1.0)

    def test_invalid_shots(self, rng):
        with pytest.raises(DomainError):
            encoding.sample_outcomes(np.eye(2) / 2, 0, rng)
        with pytest.raises(DomainError):
            encoding.sample_outcomes(np.eye(2) / 2, 10, None)
