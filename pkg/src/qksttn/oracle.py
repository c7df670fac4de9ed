"""Brute-force reference simulator over all episode qubits.

Builds the full 2^E-dimensional product state, applies every node unitary
on the qubits it acts on in the full space, and only traces out discarded
qubits at the very end. Slow by design; only for checking ``ttn.contract``.
"""

from __future__ import annotations

import numpy as np

from qksttn.encoding import EncodingParams, angles
from qksttn.errors import CapacityError, DomainError
from qksttn.qcore import unitary_from_params
from qksttn.ttn import TTNModel

MAX_QUBITS = 12


def _apply_on_qubits(rho: np.ndarray, u: np.ndarray, qubits: list[int], n: int) -> np.ndarray:
    """U rho U^dagger with U acting on ``qubits`` (in that order) of an n-qubit tensor."""
    k = len(qubits)
    ut = u.reshape((2,) * (2 * k))
    # rows: contract U's input legs with rho's ket legs
    rho = np.tensordot(ut, rho, axes=(list(range(k, 2 * k)), qubits))
    rho = np.moveaxis(rho, list(range(k)), qubits)
    bra = [n + q for q in qubits]
    rho = np.tensordot(rho, ut.conj(), axes=(bra, list(range(k, 2 * k))))
    return np.moveaxis(rho, list(range(2 * n - k, 2 * n)), bra)


def _product_state(thetas: np.ndarray) -> np.ndarray:
    psi = np.ones(1)
    for t in thetas:
        psi = np.kron(psi, np.array([np.cos(t / 2), np.sin(t / 2)]))
    return np.outer(psi, psi.conj()).astype(complex)


def dense_simulate(enc: EncodingParams, model: TTNModel, x) -> np.ndarray:
    """Root density matrix of one input, computed in the full Hilbert space."""
    E = enc.E
    if E > MAX_QUBITS:
        raise CapacityError(f"dense simulation is capped at {MAX_QUBITS} qubits, got E={E}")
    topo = model.topology
    per_leaf = 1 if topo.chi == 2 else 2
    if topo.leaves * per_leaf != E:
        raise DomainError(f"model has {topo.leaves} leaves of {per_leaf} qubits, E={E}")
    rho = _product_state(angles(enc, x)).reshape((2,) * (2 * E))

    # qubits carried by each surviving wire, starting from the leaves
    wires = [list(range(j * per_leaf, (j + 1) * per_leaf)) for j in range(topo.leaves)]
    d = topo.chi ** 2
    kept = wires[0]
    for layer in range(topo.layers):
        nxt = []
        for pos in range(topo.layer_size(layer)):
            node = topo.node_id(layer, pos)
            u = unitary_from_params(model.params[model.param_index(node)], d)
            first, second = wires[2 * pos], wires[2 * pos + 1]
            rho = _apply_on_qubits(rho, u, first + second, E)
            nxt.append(first)
            if layer == topo.layers - 1:
                kept = first + second if model.full_root else first
        wires = nxt

    traced = [q for q in range(E) if q not in kept]
    k = len(kept)
    perm = kept + traced + [E + q for q in kept] + [E + q for q in traced]
    rho = np.transpose(rho, perm).reshape(2**k, 2 ** (E - k), 2**k, 2 ** (E - k))
    return np.einsum("ajbj->ab", rho)


def dense_objective(enc: EncodingParams, model: TTNModel, batch) -> float:
    """Class-balanced objective computed purely through ``dense_simulate``."""
    X, y = batch
    y = np.asarray(y)
    cls = model.readout.class_of_outcome(model.root_dim)
    n_classes = model.readout.n_classes
    correct = np.empty(len(y))
    for i, (x, label) in enumerate(zip(X, y)):
        diag = np.real(np.diagonal(dense_simulate(enc, model, x)))
        correct[i] = diag[cls == label].sum()
    means = [correct[y == c].mean() for c in range(n_classes)]
    avg = float(np.mean(means))
    return 2.0 * avg - 1.0 if n_classes == 2 else avg
