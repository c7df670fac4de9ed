"""Objective, exact gradients, optimizers and training loops."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.optimize

from qksttn import qcore, ttn
from qksttn.encoding import (EXACT, EncodingParams, angles, episode_state, episode_state_derivative,
                             group_episodes, sample_outcomes)
from qksttn.errors import BatchCompositionError, ConfigError, DivergenceError, ParameterShapeError

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 40
    optimizer: str = "adam"  # adam | adamw-restarts | cg-sweeps
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    t0: int = 1
    t_mult: int = 2
    restarts: int = 5
    feature_optimization: bool = True
    cg_tol: float = 1e-5
    cg_maxiter: int = 100
    fo_maxiter: int = 5
    sweep_batch_size: int = 1024
    sweeps: int = 1
    seed: int = 0
    chunk: int = 256

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.optimizer not in ("adam", "adamw-restarts", "cg-sweeps"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigError("learning rate and weight decay must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GradientBundle:
    ttn: np.ndarray | None
    omega: np.ndarray | None
    beta: np.ndarray | None


def n_classes_of(model: ttn.TTNModel) -> int:
    return model.readout.n_classes


def example_weights(y, n_classes: int) -> np.ndarray:
    """Weight of each example in the class-balanced mean of correct-class probabilities."""
    y = np.asarray(y)
    counts = np.bincount(y, minlength=n_classes)
    if y.size == 0 or np.any(counts[:n_classes] == 0) or y.max() >= n_classes:
        raise BatchCompositionError(
            f"batch must contain every class 0..{n_classes - 1}; counts {counts.tolist()}"
        )
    return 1.0 / (n_classes * counts[y])


def _affine(n_classes: int) -> tuple[float, float]:
    """(scale, offset) mapping the balanced mean correct probability to ``f``."""
    return (2.0, -1.0) if n_classes == 2 else (1.0, 0.0)


def _pr_error(f: float, n_classes: int) -> float:
    return 0.5 - 0.5 * f if n_classes == 2 else 1.0 - f


def correct_probs(model: ttn.TTNModel, enc: EncodingParams, X, y, chunk: int = 256) -> np.ndarray:
    """p(label | x) per example."""
    probs = predict_proba(model, enc, X, chunk=chunk)
    return probs[np.arange(len(y)), np.asarray(y)]


def predict_proba(model: ttn.TTNModel, enc: EncodingParams, X, chunk: int = 256,
                  workers: int | None = None) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    out = []
    for i in range(0, len(X), chunk):
        leaves = group_episodes(episode_state(angles(enc, X[i : i + chunk])), model.chi)
        out.append(ttn.readout_probs(ttn.contract(model, leaves, workers=workers), model.readout))
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.readout.n_classes))


def predict(model: ttn.TTNModel, enc: EncodingParams, X, chunk: int = 256) -> np.ndarray:
    return np.argmax(predict_proba(model, enc, X, chunk=chunk), axis=1)


def readout_features(model: ttn.TTNModel, enc: EncodingParams, X, shots=EXACT,
                     rng: np.random.Generator | None = None, chunk: int = 256) -> np.ndarray:
    """Root outcome frequencies per example, shape (N, root_dim).

    Multi-shot TTN classification fits a linear classifier on these
    (``baseline.train_linear``) instead of taking the argmax of the readout.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    out = []
    for i in range(0, len(X), chunk):
        leaves = group_episodes(episode_state(angles(enc, X[i : i + chunk])), model.chi)
        out.append(sample_outcomes(ttn.contract(model, leaves), shots, rng))
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.root_dim))


def objective_batch(model: ttn.TTNModel, enc: EncodingParams, batch) -> tuple[float, float]:
    """(f, pr_error) on a labeled batch ``(X, y)``."""
    X, y = batch
    y = np.asarray(y)
    k = n_classes_of(model)
    w = example_weights(y, k)
    scale, offset = _affine(k)
    f = scale * float(np.dot(w, correct_probs(model, enc, X, y))) + offset
    return f, _pr_error(f, k)


def _episode_adjoints(leaf_adj: np.ndarray, states: np.ndarray, chi: int) -> np.ndarray:
    """Adjoint of every 2x2 episode state, shape (N, E, 2, 2)."""
    if chi == 2:
        return leaf_adj
    n, L = leaf_adj.shape[:2]
    g = leaf_adj.reshape(n, L, 2, 2, 2, 2)
    first, second = states[:, 0::2], states[:, 1::2]
    out = np.empty((n, 2 * L, 2, 2), dtype=complex)
    out[:, 0::2] = np.einsum("nlabcd,nldb->nlac", g, second)
    out[:, 1::2] = np.einsum("nlabcd,nlca->nlbd", g, first)
    return out


def _chunk_pass(model, enc, units, X, y, w, features: bool, want_ttn: bool):
    scale, _ = _affine(n_classes_of(model))
    proj = model.readout.projectors(model.root_dim)
    theta = angles(enc, X)
    states = episode_state(theta)
    leaves = group_episodes(states, model.chi)
    root, trace = ttn._forward(units, leaves, keep=True, full_root=model.full_root)
    probs = ttn.readout_probs(root, model.readout)
    value = scale * float(np.dot(w, probs[np.arange(len(y)), y]))
    root_adj = (scale * w)[:, None, None] * proj[y]
    bw = ttn.backward(model, units, trace, root_adj, need_leaves=features)
    g_ttn = ttn.param_gradient(model, units, bw.node_grads) if want_ttn else None
    g_theta = None
    if features:
        ep_adj = _episode_adjoints(bw.leaf_adjoints, states, model.chi)
        g_theta = np.einsum("neab,neba->ne", ep_adj, episode_state_derivative(theta)).real
    return value, g_ttn, g_theta


def gradients(model: ttn.TTNModel, enc: EncodingParams, batch, features: bool = True,
              want_ttn: bool = True, chunk: int = 256) -> tuple[float, GradientBundle]:
    """Objective ``f`` and its exact gradient with respect to all trainable parameters.

    The batch is processed in chunks; per-chunk contributions are summed in
    input order so the result does not depend on scheduling.
    """
    X, y = batch
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    k = n_classes_of(model)
    w = example_weights(y, k)
    units = ttn.LayerUnitaries(model)
    f = _affine(k)[1]
    g_ttn = np.zeros_like(model.params) if want_ttn else None
    g_theta = np.zeros((len(y), enc.E)) if features else None
    for i in range(0, len(y), chunk):
        sl = slice(i, i + chunk)
        value, gt, gth = _chunk_pass(model, enc, units, X[sl], y[sl], w[sl], features, want_ttn)
        f += value
        if want_ttn:
            g_ttn += gt
        if features:
            g_theta[sl] = gth
    g_omega = g_beta = None
    if features:
        g_omega = np.where(enc.mask, g_theta.T @ X, 0.0)
        g_beta = g_theta.sum(axis=0)
    return f, GradientBundle(g_ttn, g_omega, g_beta)


def grad_ttn(model: ttn.TTNModel, enc: EncodingParams, batch) -> GradientBundle:
    return gradients(model, enc, batch, features=False)[1]


def grad_features(model: ttn.TTNModel, enc: EncodingParams, batch) -> GradientBundle:
    _, g = gradients(model, enc, batch, features=True, want_ttn=False)
    return GradientBundle(None, g.omega, g.beta)


def count_parameters(model: ttn.TTNModel, enc: EncodingParams) -> tuple[int, dict]:
    d = model.chi ** 2
    n_vec = model.topology.layers if model.tied else model.topology.n_nodes
    features = int(np.sum(enc.nonzeros + 1))
    network = n_vec * (d * d - 1)
    return features + network, {
        "features": features,
        "ttn": network,
        "tensors": n_vec,
        "per_tensor": d * d - 1,
    }


# ---------------------------------------------------------------- optimizers


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


ADAM_DEFAULTS = {"beta1": 0.9, "beta2": 0.999, "eps": 1e-8}


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, hyper: dict | None = None,
              weight_decay: float = 0.0) -> tuple[dict, AdamState]:
    """One Adam ascent step on every array in ``params`` (in place and returned).

    ``weight_decay`` is decoupled: ``p -= weight_decay * p`` after the
    moment update, as in AdamW.
    """
    h = {**ADAM_DEFAULTS, **(hyper or {})}
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ParameterShapeError(f"gradient for {name!r} has shape {g.shape}, expected {p.shape}")
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = h["beta1"] * m + (1 - h["beta1"]) * g
        v = h["beta2"] * v + (1 - h["beta2"]) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - h["beta1"] ** t)
        v_hat = v / (1 - h["beta2"] ** t)
        p += lr * m_hat / (np.sqrt(v_hat) + h["eps"])
        if weight_decay:
            p -= weight_decay * p
    return params, state


def cosine_restart_factor(epoch: float, t0: int = 1, t_mult: int = 2) -> tuple[float, int]:
    """(annealing factor, cycle index) at a fractional epoch position."""
    if epoch < 0:
        raise ConfigError("epoch must be nonnegative")
    t_i, start, cycle = float(t0), 0.0, 0
    while epoch >= start + t_i:
        start += t_i
        t_i *= t_mult
        cycle += 1
    t_cur = epoch - start
    return 0.5 * (1.0 + math.cos(math.pi * t_cur / t_i)), cycle


def restart_boundaries(t0: int, t_mult: int, restarts: int) -> list[int]:
    out, length, total = [], t0, 0
    for _ in range(restarts):
        total += length
        out.append(total)
        length *= t_mult
    return out


def adamw_restarts_step(params: dict, grads: dict, state: AdamState, epoch: float,
                        config: TrainConfig, hyper: dict | None = None):
    """AdamW step with the learning rate and decay both scaled by the cosine factor."""
    factor, _ = cosine_restart_factor(epoch, config.t0, config.t_mult)
    return adam_step(params, grads, state, config.learning_rate * factor, hyper,
                     weight_decay=config.weight_decay * factor)


# ---------------------------------------------------------------- training


class StratifiedSampler:
    """Class-balanced minibatches drawn from per-class reshuffled streams."""

    def __init__(self, y, n_classes: int, rng: np.random.Generator):
        y = np.asarray(y)
        self.rng = rng
        self.pools = [np.flatnonzero(y == c) for c in range(n_classes)]
        if any(len(p) == 0 for p in self.pools):
            raise BatchCompositionError("training data lacks a class present in the readout")
        self.queues = [np.empty(0, dtype=int) for _ in self.pools]

    def _take(self, c: int, k: int) -> np.ndarray:
        out = []
        while k > 0:
            if self.queues[c].size == 0:
                self.queues[c] = self.rng.permutation(self.pools[c])
            part = self.queues[c][:k]
            self.queues[c] = self.queues[c][k:]
            out.append(part)
            k -= part.size
        return np.concatenate(out)

    def batch(self, size: int) -> np.ndarray:
        per = max(1, size // len(self.pools))
        return np.concatenate([self._take(c, per) for c in range(len(self.pools))])


def classification_error(model: ttn.TTNModel, enc: EncodingParams, X, y) -> float:
    if len(y) == 0:
        return float("nan")
    return float(np.mean(predict(model, enc, X) != np.asarray(y)))


def train_global(model: ttn.TTNModel, enc: EncodingParams, dataset, config: TrainConfig,
                 validation=None, callback=None):
    """Minibatch training of all parameters at once (Adam or AdamW with restarts).

    ``dataset`` and ``validation`` are ``(X, y)`` pairs. Returns the trained
    ``(model, enc)`` copies and a list of per-epoch metric dicts.
    """
    X, y = dataset
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    if len(y) == 0:
        raise ConfigError("training set is empty")
    if config.optimizer == "cg-sweeps":
        raise ConfigError("train_global needs optimizer 'adam' or 'adamw-restarts'")
    model = model.copy()
    enc = enc.copy()
    k = n_classes_of(model)
    rng = np.random.default_rng(config.seed)
    sampler = StratifiedSampler(y, k, rng)
    steps = max(1, len(y) // config.batch_size)
    params = {"ttn": model.params}
    if config.feature_optimization:
        params.update(omega=enc.omega, beta=enc.beta)
    state = AdamState()
    history = []
    for epoch in range(config.epochs):
        fs = []
        for step in range(steps):
            idx = sampler.batch(config.batch_size)
            f, g = gradients(model, enc, (X[idx], y[idx]), features=config.feature_optimization,
                             chunk=config.chunk)
            if not np.isfinite(f):
                record = {"epoch": epoch, "step": step, "objective": f}
                raise DivergenceError(f"non-finite objective at epoch {epoch}, step {step}", record)
            fs.append(f)
            grads = {"ttn": g.ttn, "omega": g.omega, "beta": g.beta}
            if config.optimizer == "adam":
                adam_step(params, grads, state, config.learning_rate,
                          weight_decay=config.weight_decay)
            else:
                adamw_restarts_step(params, grads, state, epoch + step / steps, config)
        f_mean = float(np.mean(fs))
        entry = {"epoch": epoch + 1, "train_objective": f_mean,
                 "train_pr_error": _pr_error(f_mean, k)}
        if validation is not None:
            entry["validation_error"] = classification_error(model, enc, *validation)
        history.append(entry)
        log.info("epoch %d: %s", epoch + 1, entry)
        if callback is not None:
            callback(entry)
    return (model, enc), history


def _maximize(fun_and_grad, x0: np.ndarray, tol: float, maxiter: int) -> tuple[np.ndarray, float, float]:
    """Conjugate-gradient ascent; returns (x, start value, end value), never worse than x0."""
    def neg(x):
        val, grad = fun_and_grad(x)
        return -val, -grad

    start = fun_and_grad(x0)[0]
    res = scipy.optimize.minimize(neg, x0, jac=True, method="CG", tol=tol,
                                  options={"maxiter": maxiter})
    end = -float(res.fun)
    if not np.isfinite(end) or end < start:
        return x0, start, start
    return res.x, start, end


def _node_objective(model: ttn.TTNModel, v: np.ndarray, offset: float):
    d = model.chi ** 2

    def fun(x):
        h = qcore.herm_from_params(x, d)
        u, eig = qcore.expm_hermitian(h, return_eig=True)
        val = ttn.environment_value(v, u) + offset
        z = ttn.environment_grad_matrix(v, u)
        return val, ttn.frechet_param_grad(z, eig)

    return fun


def _episode_objective(x_batch: np.ndarray, adj: np.ndarray, mask_row: np.ndarray, offset: float):
    cols = np.flatnonzero(mask_row)
    xs = x_batch[:, cols]

    def fun(z):
        w, b = z[:-1], z[-1]
        theta = xs @ w + b
        val = float(np.einsum("nab,nba->", adj, episode_state(theta)).real) + offset
        g = np.einsum("nab,nba->n", adj, episode_state_derivative(theta)).real
        return val, np.concatenate([g @ xs, [g.sum()]])

    return fun, cols


def train_sweeps(model: ttn.TTNModel, enc: EncodingParams, dataset, config: TrainConfig,
                 validation=None, node_callback=None):
    """Sequential per-tensor conjugate-gradient sweeps over fixed batches.

    Every sweep draws one class-balanced batch, then optimizes each node
    against its environment (leaves first, root last) and, with feature
    optimization on, each episode's ``(omega_e, beta_e)`` in turn.
    ``node_callback(info)`` is called after every update with the objective
    before and after it.
    """
    if model.tied:
        raise ConfigError("sequential sweeps need an untied model; use train_global for tied models")
    X, y = dataset
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    model = model.copy()
    enc = enc.copy()
    k = n_classes_of(model)
    scale, offset = _affine(k)
    rng = np.random.default_rng(config.seed)
    sampler = StratifiedSampler(y, k, rng)
    proj = model.readout.projectors(model.root_dim)
    history = []
    for sweep in range(config.sweeps):
        idx = sampler.batch(min(config.sweep_batch_size, len(y)))
        xb, yb = X[idx], y[idx]
        w = example_weights(yb, k)
        root_adj = (scale * w)[:, None, None] * proj[yb]
        f_start = objective_batch(model, enc, (xb, yb))[0]
        for node in range(model.topology.n_nodes):
            leaves = group_episodes(episode_state(angles(enc, xb)), model.chi)
            v = ttn.environment_from_adjoint(model, leaves, node, root_adj)
            fun = _node_objective(model, v, offset)
            x_new, before, after = _maximize(fun, model.params[node].copy(),
                                             config.cg_tol, config.cg_maxiter)
            model.params[node] = x_new
            if node_callback is not None:
                node_callback({"sweep": sweep, "kind": "node", "index": node,
                               "before": before, "after": after})
        if config.feature_optimization:
            for e in range(enc.E):
                adj = _episode_environment(model, enc, xb, root_adj, e)
                fun, cols = _episode_objective(xb, adj, enc.mask[e], offset)
                z0 = np.concatenate([enc.omega[e, cols], [enc.beta[e]]])
                z_new, before, after = _maximize(fun, z0, config.cg_tol, config.fo_maxiter)
                enc.omega[e, cols] = z_new[:-1]
                enc.beta[e] = z_new[-1]
                if node_callback is not None:
                    node_callback({"sweep": sweep, "kind": "episode", "index": e,
                                   "before": before, "after": after})
        f_end = objective_batch(model, enc, (xb, yb))[0]
        entry = {"sweep": sweep + 1, "batch_objective_start": f_start,
                 "batch_objective": f_end, "train_pr_error": _pr_error(f_end, k)}
        if validation is not None:
            entry["validation_error"] = classification_error(model, enc, *validation)
        history.append(entry)
        log.info("sweep %d: %s", sweep + 1, entry)
    return (model, enc), history


def _episode_environment(model, enc, xb, root_adj, e: int) -> np.ndarray:
    """Adjoint of episode ``e``'s 2x2 state for every batch example."""
    units = ttn.LayerUnitaries(model)
    states = episode_state(angles(enc, xb))
    leaves = group_episodes(states, model.chi)
    _, trace = ttn._forward(units, leaves, keep=True, full_root=model.full_root)
    bw = ttn.backward(model, units, trace, root_adj, need_leaves=True)
    return _episode_adjoints(bw.leaf_adjoints, states, model.chi)[:, e]
