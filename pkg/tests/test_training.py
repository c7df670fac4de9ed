import math

import numpy as np
import pytest

from helpers import balanced_batch, fd_check, random_instance
from qksttn import encoding, qcore, training, ttn
from qksttn.encoding import EncodingParams
from qksttn.errors import BatchCompositionError, ConfigError, ParameterShapeError
from qksttn.training import AdamState, TrainConfig


def toy_dataset(n=64, p=3):
    a, b = np.full(p, 0.2), np.full(p, 0.9)
    X = np.array([a if i % 2 == 0 else b for i in range(n)])
    return X, np.arange(n) % 2


class TestObjective:
    def test_perfect_routing(self):
        enc = EncodingParams(np.array([[np.pi], [0.0]]), np.zeros(2), np.ones((2, 1), bool), 1.0)
        model = ttn.identity_ttn(ttn.build_topology(2, 2))
        f, err = training.objective_batch(model, enc, (np.array([[0.0], [1.0]]), np.array([0, 1])))
        assert np.isclose(f, 1.0) and np.isclose(err, 0.0, atol=1e-15)

    def test_identical_inputs(self, rng):
        enc, model = random_instance(4, 2, rng)
        x = rng.random(enc.p)
        f, err = training.objective_batch(model, enc, (np.array([x, x]), np.array([0, 1])))
        assert abs(f) <= 1e-12 and abs(err - 0.5) <= 1e-12

    def test_per_example_decomposition(self, rng):
        enc, model = random_instance(4, 2, rng)
        X, y = balanced_batch(4, enc.p, 2, rng)
        p0 = [ttn.readout_probs(ttn.contract(model, encoding.leaf_states(enc, x, 2)), model.readout)[0]
              for x in X]
        expected = np.mean([p for p, c in zip(p0, y) if c == 0]) - np.mean([p for p, c in zip(p0, y) if c == 1])
        f, err = training.objective_batch(model, enc, (X, y))
        assert abs(f - expected) <= 1e-12

    def test_pr_error_is_one_minus_mean_correct(self, rng):
        spec = ttn.multiclass_readout(16, 10)
        enc, model = random_instance(8, 4, rng, readout=spec)
        X, y = balanced_batch(20, enc.p, 10, rng)
        correct = [training.correct_probs(model, enc, X[i : i + 1], y[i : i + 1])[0] for i in range(20)]
        _, err = training.objective_batch(model, enc, (X, y))
        assert abs(err - (1 - np.mean(correct))) <= 1e-12

    def test_missing_class(self, rng):
        enc, model = random_instance(4, 2, rng)
        with pytest.raises(BatchCompositionError):
            training.objective_batch(model, enc, (rng.random((3, enc.p)), np.zeros(3, int)))


GRAD_CASES = [(4, 2, False), (4, 2, True), (4, 4, False), (8, 4, True), (8, 2, False)]


class TestGradients:
    @pytest.mark.parametrize("E,chi,tied", GRAD_CASES)
    def test_ttn_finite_difference(self, E, chi, tied, rng):
        enc, model = random_instance(E, chi, rng, p=3, tied=tied)
        batch = balanced_batch(6, enc.p, 2, rng)
        g = training.grad_ttn(model, enc, batch).ttn
        fd_check(g, lambda: training.objective_batch(model, enc, batch)[0], model.params)

    @pytest.mark.parametrize("E,chi,tied", GRAD_CASES)
    def test_feature_finite_difference(self, E, chi, tied, rng):
        enc, model = random_instance(E, chi, rng, p=3, tied=tied)
        batch = balanced_batch(6, enc.p, 2, rng)
        g = training.grad_features(model, enc, batch)
        f = lambda: training.objective_batch(model, enc, batch)[0]  # noqa: E731
        fd_check(g.omega, f, enc.omega)
        fd_check(g.beta, f, enc.beta)

    def test_multiclass_full_root_finite_difference(self, rng):
        enc, model = random_instance(8, 4, rng, p=2, readout=ttn.multiclass_readout(16, 10))
        batch = balanced_batch(10, enc.p, 10, rng)
        _, g = training.gradients(model, enc, batch)
        f = lambda: training.objective_batch(model, enc, batch)[0]  # noqa: E731
        fd_check(g.ttn[-1], f, model.params[-1])
        fd_check(g.beta, f, enc.beta)

    def test_symmetric_optimum_zero_gradient(self, rng):
        enc, model = random_instance(4, 2, rng)
        x = rng.random(enc.p)
        g = training.grad_ttn(model, enc, (np.array([x, x]), np.array([0, 1])))
        assert np.max(np.abs(g.ttn)) <= 1e-14

    def test_tied_is_sum_of_untied(self, rng):
        enc, model = random_instance(8, 2, rng, tied=True)
        batch = balanced_batch(6, enc.p, 2, rng)
        g_tied = training.grad_ttn(model, enc, batch).ttn
        g_untied = training.grad_ttn(model.untied(), enc, batch).ttn
        for layer in range(model.topology.layers):
            off, size = model.topology.layer_offset(layer), model.topology.layer_size(layer)
            assert np.allclose(g_tied[layer], g_untied[off : off + size].sum(axis=0), atol=1e-13)

    def test_masked_row_zero(self, rng):
        enc = encoding.init_encoding(4, 3, 2, 1.0, rng)
        enc.mask[1] = False
        enc.omega[1] = 0
        model = ttn.init_ttn(ttn.build_topology(4, 2), False, rng)
        g = training.grad_features(model, enc, balanced_batch(6, 3, 2, rng))
        assert np.all(g.omega[~enc.mask] == 0)

    def test_beta_equals_omega_at_unit_inputs(self, rng):
        enc, model = random_instance(4, 2, rng, p=2)
        X = np.ones((4, 2))
        X[:, 1] = rng.random(4)
        g = training.grad_features(model, enc, (X, np.array([0, 1, 0, 1])))
        assert np.allclose(g.beta, g.omega[:, 0], atol=1e-14)

    def test_chunking_does_not_change_result(self, rng):
        enc, model = random_instance(8, 2, rng)
        batch = balanced_batch(12, enc.p, 2, rng)
        f1, g1 = training.gradients(model, enc, batch, chunk=5)
        f2, g2 = training.gradients(model, enc, batch, chunk=256)
        assert abs(f1 - f2) <= 1e-13
        assert np.allclose(g1.ttn, g2.ttn, atol=1e-13) and np.allclose(g1.omega, g2.omega, atol=1e-13)


class TestAdam:
    def test_zero_gradient(self):
        params = {"a": np.array([1.0, 2.0])}
        state = AdamState()
        training.adam_step(params, {"a": np.zeros(2)}, state, 0.1)
        assert np.array_equal(params["a"], [1.0, 2.0]) and state.step == 1

    def test_first_step_is_lr(self):
        params = {"a": np.zeros(3)}
        training.adam_step(params, {"a": np.ones(3)}, AdamState(), 1e-3)
        assert np.allclose(params["a"], 1e-3, rtol=1e-7)

    def test_quadratic_probe(self):
        x = {"x": np.array([0.0])}
        state = AdamState()
        losses = []
        for _ in range(100):
            losses.append(float((x["x"][0] - 3) ** 2))
            training.adam_step(x, {"x": -2 * (x["x"] - 3)}, state, 0.05)
        assert np.all(np.diff(losses[5:]) < 0)

    def test_shape_mismatch(self):
        with pytest.raises(ParameterShapeError):
            training.adam_step({"a": np.zeros(3)}, {"a": np.zeros(2)}, AdamState(), 0.1)

    def test_decoupled_decay(self):
        params = {"a": np.array([2.0])}
        training.adam_step(params, {"a": np.zeros(1)}, AdamState(), 0.1, weight_decay=0.25)
        assert np.isclose(params["a"][0], 1.5)


class TestSchedule:
    def test_cycle_start_and_end(self):
        assert training.cosine_restart_factor(0.0)[0] == 1.0
        assert training.cosine_restart_factor(2.999999, 1, 2)[0] < 1e-10

    def test_boundaries(self):
        assert training.restart_boundaries(1, 2, 5) == [1, 3, 7, 15, 31]

    def test_enumerated_table(self):
        expected = []
        for t_i in (1, 2, 4, 8, 16):
            expected += [0.5 * (1 + math.cos(math.pi * k / t_i)) for k in range(t_i)]
        assert expected[:7] == pytest.approx([1, 1, 0.5, 1, 0.5 + 0.5 * math.sqrt(0.5), 0.5,
                                              0.5 - 0.5 * math.sqrt(0.5)])
        got = [training.cosine_restart_factor(e, 1, 2)[0] for e in range(31)]
        assert got == pytest.approx(expected, abs=1e-15)
        assert [training.cosine_restart_factor(e)[1] for e in (0, 1, 3, 7, 15, 30)] == [0, 1, 2, 3, 4, 4]

    def test_scales_lr_and_decay(self):
        cfg = TrainConfig(learning_rate=0.1, weight_decay=0.5)
        params = {"a": np.array([1.0])}
        training.adamw_restarts_step(params, {"a": np.zeros(1)}, AdamState(), 2.0, cfg)
        assert np.isclose(params["a"][0], 1 - 0.5 * 0.5)


class TestSampler:
    def test_balanced_batches(self, rng):
        y = np.array([0] * 50 + [1] * 7)
        sampler = training.StratifiedSampler(y, 2, rng)
        for _ in range(5):
            idx = sampler.batch(32)
            assert np.bincount(y[idx]).tolist() == [16, 16]

    def test_missing_class(self, rng):
        with pytest.raises(BatchCompositionError):
            training.StratifiedSampler(np.zeros(4, int), 2, rng)


class TestTrainGlobal:
    def test_toy_separable(self, rng):
        enc = encoding.init_encoding(4, 3, 3, 1.0, rng)
        model = ttn.init_ttn(ttn.build_topology(4, 2), False, rng)
        cfg = TrainConfig(batch_size=32, epochs=50, learning_rate=0.05)
        (model, enc), hist = training.train_global(model, enc, toy_dataset(), cfg)
        assert hist[-1]["train_pr_error"] <= 0.01

    def test_no_op_training(self, rng):
        enc = encoding.init_encoding(4, 3, 3, 1.0, rng)
        model = ttn.identity_ttn(ttn.build_topology(4, 2))
        cfg = TrainConfig(batch_size=8, epochs=4, learning_rate=0.0, feature_optimization=False)
        _, hist = training.train_global(model, enc, toy_dataset(16), cfg)
        values = [h["train_objective"] for h in hist]
        assert max(values) - min(values) <= 1e-12

    def test_deterministic(self, rng):
        enc, model = random_instance(4, 2, rng, p=3)
        cfg = TrainConfig(batch_size=8, epochs=3, optimizer="adamw-restarts", weight_decay=4e-4, seed=3)
        data = toy_dataset(32)
        (m1, e1), h1 = training.train_global(model, enc, data, cfg, validation=data)
        (m2, e2), h2 = training.train_global(model, enc, data, cfg, validation=data)
        assert h1 == h2 and np.array_equal(m1.params, m2.params) and np.array_equal(e1.omega, e2.omega)

    def test_mask_and_unitarity_preserved(self, rng):
        enc = encoding.init_encoding(4, 6, 2, 1.0, rng)
        model = ttn.init_ttn(ttn.build_topology(4, 2), False, rng)
        cfg = TrainConfig(batch_size=8, epochs=3, learning_rate=0.1, weight_decay=0.01)
        (model, enc2), _ = training.train_global(model, enc, (rng.random((32, 6)), np.arange(32) % 2), cfg)
        assert np.all(enc2.omega[~enc.mask] == 0)
        for vec in model.params:
            assert qcore.unitarity_error(qcore.unitary_from_params(vec, 4)) <= 1e-12

    def test_rejects_sweeps_optimizer(self, rng):
        enc, model = random_instance(4, 2, rng)
        with pytest.raises(ConfigError):
            training.train_global(model, enc, toy_dataset(8), TrainConfig(optimizer="cg-sweeps"))

    @pytest.mark.parametrize("kwargs", [{"batch_size": 0}, {"epochs": 0}, {"optimizer": "sgd"},
                                        {"learning_rate": -1.0}])
    def test_invalid_config(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)


class TestSweeps:
    def test_single_node_direct_optimization(self, rng):
        enc, model = random_instance(2, 2, rng, p=3)
        X, y = toy_dataset(16)
        cfg = TrainConfig(optimizer="cg-sweeps", sweeps=1, feature_optimization=False)
        (trained, _), hist = training.train_sweeps(model, enc, (X, y), cfg)

        def fun(x):
            m = model.copy()
            m.params[0] = x
            return training.gradients(m, enc, (X, y), features=False)[0], \
                training.gradients(m, enc, (X, y), features=False)[1].ttn[0]

        direct, _, end = training._maximize(fun, model.params[0].copy(), cfg.cg_tol, cfg.cg_maxiter)
        assert np.allclose(trained.params[0], direct, atol=1e-8)
        assert abs(hist[0]["batch_objective"] - end) <= 1e-10

    def test_monotone_updates(self, rng):
        enc, model = random_instance(8, 2, rng, p=3)
        X, y = rng.random((64, 3)), np.arange(64) % 2
        steps = []
        cfg = TrainConfig(optimizer="cg-sweeps", sweeps=2, sweep_batch_size=64, cg_maxiter=20)
        training.train_sweeps(model, enc, (X, y), cfg, node_callback=steps.append)
        assert len(steps) == 2 * (7 + 8)
        assert all(s["after"] - s["before"] >= -1e-9 for s in steps)

    def test_toy_sanity(self, rng):
        enc, model = random_instance(4, 2, rng, p=3)
        cfg = TrainConfig(optimizer="cg-sweeps", sweeps=3)
        (_, _), hist = training.train_sweeps(model, enc, toy_dataset(), cfg)
        assert hist[-1]["train_pr_error"] <= 0.01

    def test_tied_rejected(self, rng):
        enc, model = random_instance(4, 2, rng, tied=True)
        with pytest.raises(ConfigError):
            training.train_sweeps(model, enc, toy_dataset(8), TrainConfig(optimizer="cg-sweeps"))


class TestCountParameters:
    @pytest.mark.parametrize("tied,r,expected", [
        (False, 784, 466_945),
        (True, 784, 403_960),
        (True, 392, 203_256),
        (True, 196, 102_904),
        (True, 98, 52_728),
        (True, 49, 27_640),
    ])
    def test_table_rows(self, tied, r, expected):
        rng = np.random.default_rng(0)
        enc = encoding.init_encoding(512, 784, r, 0.1, rng)
        model = ttn.identity_ttn(ttn.build_topology(512, 4), tied)
        total, parts = training.count_parameters(model, enc)
        assert total == expected
        assert parts["per_tensor"] == 255


class TestReadoutFeatures:
    def test_exact_matches_root_diagonal(self, rng):
        enc, model = random_instance(8, 4, rng)
        X = rng.random((3, enc.p))
        feats = training.readout_features(model, enc, X)
        roots = ttn.contract(model, encoding.leaf_states(enc, X, 4))
        assert np.allclose(feats, np.real(np.diagonal(roots, axis1=1, axis2=2)), atol=1e-14)
        # the binary readout marginal is a linear function of these features
        assert np.allclose(feats[:, :2].sum(axis=1), training.predict_proba(model, enc, X)[:, 0])

    def test_finite_shots_feed_linear_classifier(self, rng):
        from qksttn import baseline

        enc, model = random_instance(4, 2, rng, p=3)
        X, y = toy_dataset(40)
        feats = training.readout_features(model, enc, X, shots=100, rng=rng)
        assert feats.shape == (40, 2) and np.allclose(feats.sum(axis=1), 1)
        clf = baseline.train_linear(feats, y, C=1.0)
        assert 0.0 <= baseline.evaluate(clf, feats, y) <= 1.0
