"""Classical post-processing of kitchen-sink features with linear SVMs."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable

import numba
import numpy as np

from qksttn.encoding import EXACT, EncodingParams, angles
from qksttn.errors import DomainError


def qks_features(enc: EncodingParams, X, shots=EXACT, rng: np.random.Generator | None = None,
                 chunk: int = 4096) -> np.ndarray:
    """Per-episode frequency of outcome 1, shape (N, E).

    ``shots=1`` is a single Bernoulli draw per episode and example,
    ``shots=EXACT`` the probability ``sin^2(theta/2)`` itself.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if shots != EXACT and (rng is None or int(shots) < 1):
        raise DomainError("finite shots need shots >= 1 and a random generator")
    out = np.empty((X.shape[0], enc.E))
    for i in range(0, X.shape[0], chunk):
        p1 = np.sin(angles(enc, X[i : i + chunk]) / 2) ** 2
        if shots == EXACT:
            out[i : i + chunk] = p1
        else:
            out[i : i + chunk] = rng.binomial(int(shots), np.clip(p1, 0.0, 1.0)) / int(shots)
    return out


@numba.njit(cache=True, nogil=True)
def _relative_duality_gap(X, s, C, w, alpha):
    n, d = X.shape
    ww = 0.0
    for j in range(d):
        ww += w[j] * w[j]
    loss = 0.0
    for i in range(n):
        acc = 0.0
        for j in range(d):
            acc += w[j] * X[i, j]
        loss += max(0.0, 1.0 - s[i] * acc)
    primal = 0.5 * ww + C * loss
    dual = alpha.sum() - 0.5 * ww
    return (primal - dual) / max(abs(primal), 1e-300)


@numba.njit(cache=True, nogil=True)
def _dcd_hinge(X, s, C, tol, gap_tol, max_epochs, seed):
    """Dual coordinate descent for the L1-loss L2-regularized linear SVM.

    ``X`` carries a trailing constant column for the bias; ``s`` holds +-1
    labels. Coordinates are visited in a seeded random order with shrinking
    of variables stuck at a bound. Stops when the projected-gradient spread
    over all variables is below ``tol`` or when the relative primal-dual gap
    (checked every 10 sweeps) is below ``gap_tol``; the latter certifies the
    objective since dual <= optimum <= primal.
    """
    np.random.seed(seed)
    n, d = X.shape
    alpha = np.zeros(n)
    w = np.zeros(d)
    qii = np.empty(n)
    for i in range(n):
        acc = 0.0
        for j in range(d):
            acc += X[i, j] * X[i, j]
        qii[i] = acc
    index = np.arange(n)
    active = n
    pg_max_old = np.inf
    pg_min_old = -np.inf
    epochs = 0
    gap = np.inf
    rel = np.inf
    while epochs < max_epochs:
        for k in range(active - 1, 0, -1):
            m = np.random.randint(0, k + 1)
            index[k], index[m] = index[m], index[k]
        pg_max = -np.inf
        pg_min = np.inf
        k = 0
        while k < active:
            i = index[k]
            acc = 0.0
            for j in range(d):
                acc += w[j] * X[i, j]
            g = s[i] * acc - 1.0
            pg = 0.0
            if alpha[i] <= 0.0:
                if g > pg_max_old:
                    active -= 1
                    index[k], index[active] = index[active], index[k]
                    continue
                if g < 0.0:
                    pg = g
            elif alpha[i] >= C:
                if g < pg_min_old:
                    active -= 1
                    index[k], index[active] = index[active], index[k]
                    continue
                if g > 0.0:
                    pg = g
            else:
                pg = g
            pg_max = max(pg_max, pg)
            pg_min = min(pg_min, pg)
            if abs(pg) > 1e-14 and qii[i] > 0.0:
                old = alpha[i]
                new = min(max(old - g / qii[i], 0.0), C)
                alpha[i] = new
                step = (new - old) * s[i]
                for j in range(d):
                    w[j] += step * X[i, j]
            k += 1
        epochs += 1
        gap = pg_max - pg_min
        if gap <= tol:
            if active == n:
                break
            # converged on the shrunk set: recheck every variable
            active = n
            pg_max_old = np.inf
            pg_min_old = -np.inf
            continue
        if epochs % 10 == 0:
            rel = _relative_duality_gap(X, s, C, w, alpha)
            if rel <= gap_tol:
                break
            active = n
            pg_max_old = np.inf
            pg_min_old = -np.inf
            continue
        pg_max_old = pg_max if pg_max > 0.0 else np.inf
        pg_min_old = pg_min if pg_min < 0.0 else -np.inf
    rel = _relative_duality_gap(X, s, C, w, alpha)
    return w, alpha, epochs, gap, rel


@dataclass
class LinearModel:
    weights: np.ndarray
    bias: float
    C: float
    classes: tuple = (0, 1)
    info: dict = field(default_factory=dict)

    def decision_function(self, X) -> np.ndarray:
        return np.asarray(X, dtype=float) @ self.weights + self.bias

    def predict(self, X) -> np.ndarray:
        pos = self.decision_function(X) > 0
        return np.where(pos, self.classes[1], self.classes[0])


def hinge_objective(weights, bias, X, s, C) -> float:
    """0.5 (|w|^2 + b^2) + C sum max(0, 1 - s (w.x + b)); the bias is regularized."""
    margins = s * (np.asarray(X) @ weights + bias)
    return 0.5 * (float(weights @ weights) + bias * bias) + C * float(np.maximum(0.0, 1.0 - margins).sum())


def train_linear(features, labels, C: float = 1.0, tol: float = 1e-6, gap_tol: float = 1e-7,
                 max_epochs: int = 20_000, seed: int = 0) -> LinearModel:
    """Max-margin linear classifier on two classes (labels are any two values)."""
    X = np.ascontiguousarray(features, dtype=float)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if classes.size != 2:
        raise DomainError(f"need exactly two classes, got {classes.tolist()}")
    if C <= 0:
        raise DomainError(f"C must be positive, got {C}")
    s = np.where(labels == classes[1], 1.0, -1.0)
    Xa = np.hstack([X, np.ones((X.shape[0], 1))])
    w, alpha, epochs, gap, rel = _dcd_hinge(Xa, s, float(C), float(tol), float(gap_tol),
                                            int(max_epochs), int(seed))
    info = {"epochs": int(epochs), "pg_gap": float(gap), "duality_gap": float(rel),
            "objective": hinge_objective(w[:-1], w[-1], X, s, C)}
    return LinearModel(w[:-1].copy(), float(w[-1]), float(C), (classes[0].item(), classes[1].item()), info)


def evaluate(model, X, labels) -> float:
    """Fraction of misclassified examples; ``model`` needs a ``predict`` method."""
    labels = np.asarray(labels)
    if labels.size == 0:
        return 0.0
    return float(np.mean(model.predict(X) != labels))


@dataclass
class OvOEnsemble:
    classes: tuple
    members: dict  # (a, b) with a < b -> binary predictor returning a or b

    def votes(self, X) -> np.ndarray:
        index = {c: i for i, c in enumerate(self.classes)}
        n = np.asarray(X).shape[0]
        out = np.zeros((n, len(self.classes)), dtype=int)
        for pair in sorted(self.members):
            pred = np.asarray(self.members[pair].predict(X))
            for c in pair:
                out[pred == c, index[c]] += 1
        return out

    def predict(self, X) -> np.ndarray:
        # argmax returns the first maximum, i.e. the smallest tied label
        return np.asarray(self.classes)[np.argmax(self.votes(X), axis=1)]


def ovo_train(X, y, fit_pair: Callable | None = None, C: float = 1.0,
              workers: int | None = None) -> OvOEnsemble:
    """One binary classifier per unordered class pair.

    ``fit_pair(X_pair, y_pair)`` receives the original labels of the pair and
    must return an object whose ``predict`` yields those labels. Defaults to
    ``train_linear`` with regularization ``C``.
    """
    X = np.asarray(X)
    y = np.asarray(y)
    classes = tuple(np.unique(y).tolist())
    if len(classes) < 2:
        raise DomainError("one-vs-one needs at least two classes")
    fit = fit_pair or (lambda a, b: train_linear(a, b, C))
    pairs = list(combinations(classes, 2))

    def job(pair):
        sel = np.isin(y, pair)
        return fit(X[sel], y[sel])

    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            fitted = list(pool.map(job, pairs))
    else:
        fitted = [job(p) for p in pairs]
    return OvOEnsemble(classes, dict(zip(pairs, fitted)))


def ovo_predict(ensemble: OvOEnsemble, X) -> np.ndarray:
    return ensemble.predict(X)


def select_C(features, labels, rng: np.random.Generator, n_draws: int = 20, folds: int = 5,
             low: float = 1e-3, high: float = 1e3, fit: Callable | None = None) -> tuple[float, list]:
    """Randomized log-uniform search for C by stratified k-fold validation error.

    ``fit(X, y, C)`` trains one candidate; defaults to ``train_linear``. Returns
    the best C and the table of (C, mean validation error).
    """
    from qksttn.data import cv_folds_indices

    fit = fit or train_linear
    features = np.asarray(features)
    labels = np.asarray(labels)
    splits = cv_folds_indices(labels, folds, rng)
    draws = np.exp(rng.uniform(np.log(low), np.log(high), size=n_draws))
    table = []
    for C in draws:
        errs = []
        for train_idx, val_idx in splits:
            m = fit(features[train_idx], labels[train_idx], C)
            errs.append(evaluate(m, features[val_idx], labels[val_idx]))
        table.append((float(C), float(np.mean(errs))))
    # lowest error, ties toward the smaller C
    best = min(table, key=lambda t: (t[1], t[0]))[0]
    return best, table


def ablate_tn(enc: EncodingParams, train, test, C: float = 1.0) -> float:
    """Test error of a linear SVM on exact kitchen-sink features of ``enc``."""
    Xtr, ytr = train
    Xte, yte = test
    model = train_linear(qks_features(enc, Xtr, EXACT), ytr, C)
    return evaluate(model, qks_features(enc, Xte, EXACT), yte)


def export_features_csv(path, features, labels=None) -> None:
    features = np.asarray(features)
    cols = [f"episode_{e}" for e in range(features.shape[1])]
    data = features
    if labels is not None:
        cols = ["label"] + cols
        data = np.column_stack([np.asarray(labels), features])
    np.savetxt(path, data, delimiter=",", header=",".join(cols), comments="", fmt="%.17g")
