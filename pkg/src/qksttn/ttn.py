"""Dissipative tree tensor network over episode states.

Nodes are numbered layer by layer starting next to the leaves: layer 0
holds ``leaves // 2`` nodes, the last layer holds the root. Node ``j`` of a
layer combines outputs ``2j`` (first subsystem, survives) and ``2j + 1``
(second subsystem, traced out) of the layer below.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from qksttn import qcore
from qksttn.errors import ConfigError, DomainError

DEFAULT_CHUNK = 256


@dataclass(frozen=True)
class TreeTopology:
    chi: int
    leaves: int

    def __post_init__(self):
        if self.chi not in (2, 4):
            raise ConfigError(f"bond dimension must be 2 or 4, got {self.chi}")
        if self.leaves < 1 or self.leaves & (self.leaves - 1):
            raise ConfigError(f"leaf count {self.leaves} is not a power of 2")

    @property
    def layers(self) -> int:
        return self.leaves.bit_length() - 1

    @property
    def n_nodes(self) -> int:
        return self.leaves - 1

    def layer_size(self, layer: int) -> int:
        return self.leaves >> (layer + 1)

    def layer_offset(self, layer: int) -> int:
        return sum(self.layer_size(k) for k in range(layer))

    def node_id(self, layer: int, position: int) -> int:
        if not (0 <= layer < self.layers and 0 <= position < self.layer_size(layer)):
            raise DomainError(f"no node at layer {layer}, position {position}")
        return self.layer_offset(layer) + position

    def node_position(self, node: int) -> tuple[int, int]:
        if not 0 <= node < self.n_nodes:
            raise DomainError(f"node id {node} outside [0, {self.n_nodes})")
        for layer in range(self.layers):
            size = self.layer_size(layer)
            if node < size:
                return layer, node
            node -= size
        raise AssertionError("unreachable")

    def children(self, node: int) -> tuple[int, int]:
        """Indices of the two inputs in the layer below (leaf indices for layer 0)."""
        _, pos = self.node_position(node)
        return 2 * pos, 2 * pos + 1


def build_topology(E: int, chi: int) -> TreeTopology:
    if chi not in (2, 4):
        raise ConfigError(f"bond dimension must be 2 or 4, got {chi}")
    per_leaf = 1 if chi == 2 else 2
    if E < 1 or E % per_leaf:
        raise ConfigError(f"E={E} is not divisible by lg(chi)={per_leaf}")
    return TreeTopology(chi, E // per_leaf)


@dataclass(frozen=True)
class ReadoutSpec:
    """Root measurement.

    ``mode="binary"`` reads the marginal of one root qubit (two classes);
    ``mode="outcome-map"`` assigns each computational outcome to a class.
    An outcome map of length chi^2 measures both output subsystems of the
    root node instead of tracing one out.
    """

    mode: str = "binary"
    qubit: int = 0
    outcome_map: tuple[int, ...] | None = None

    @property
    def n_classes(self) -> int:
        if self.mode == "binary":
            return 2
        return max(self.outcome_map) + 1

    def root_dim(self, chi: int) -> int:
        if self.mode == "outcome-map" and self.outcome_map is not None:
            return len(self.outcome_map)
        return chi

    def validate(self, chi: int) -> None:
        """``chi`` is the bond dimension, or the measured root dimension."""
        n_qubits = chi.bit_length() - 1
        if self.mode == "binary":
            if not 0 <= self.qubit < n_qubits:
                raise ConfigError(f"readout qubit {self.qubit} not in a {n_qubits}-qubit root")
        elif self.mode == "outcome-map":
            table = self.outcome_map
            if table is None or len(table) not in (chi, chi * chi):
                raise ConfigError(f"outcome map must have {chi} or {chi * chi} entries")
            if min(table) < 0 or sorted(set(table)) != list(range(max(table) + 1)):
                raise ConfigError("outcome map is not surjective onto 0..K-1")
        else:
            raise ConfigError(f"unknown readout mode {self.mode!r}")

    def class_of_outcome(self, chi: int) -> np.ndarray:
        """Class index of every outcome of a ``chi``-dimensional measured root."""
        self.validate(chi)
        if self.mode == "outcome-map" and len(self.outcome_map) != chi:
            raise ConfigError(f"outcome map of length {len(self.outcome_map)} "
                              f"cannot read a {chi}-dimensional root")
        if self.mode == "binary":
            n_qubits = chi.bit_length() - 1
            outcomes = np.arange(chi)
            # qubit 0 is the most significant bit of the outcome index
            return (outcomes >> (n_qubits - 1 - self.qubit)) & 1
        return np.asarray(self.outcome_map)

    def projectors(self, chi: int) -> np.ndarray:
        """Diagonal class projectors, shape (n_classes, chi, chi)."""
        cls = self.class_of_outcome(chi)
        out = np.zeros((self.n_classes, chi, chi))
        out[cls, np.arange(chi), np.arange(chi)] = 1.0
        return out


def multiclass_readout(chi: int, n_classes: int) -> ReadoutSpec:
    """Outcome map giving the first ``chi - n_classes`` classes two outcomes each.

    For chi=16 and 10 classes: classes 0-5 get outcome pairs (2c, 2c+1),
    classes 6-9 get outcomes 12-15.
    """
    if not 2 <= n_classes <= chi or chi & (chi - 1):
        raise ConfigError(f"cannot map {chi} outcomes onto {n_classes} classes")
    doubled = chi - n_classes
    if doubled > n_classes:
        raise ConfigError(f"{chi} outcomes onto {n_classes} classes needs more than pairs")
    table = []
    for c in range(n_classes):
        table.extend([c, c] if c < doubled else [c])
    return ReadoutSpec(mode="outcome-map", outcome_map=tuple(table))


def direct_readout(chi: int, n_classes: int) -> ReadoutSpec:
    """Direct multi-class readout: chi outcomes when they suffice, else the full chi^2 root."""
    for outcomes in (chi, chi * chi):
        if n_classes <= outcomes <= 2 * n_classes:
            return multiclass_readout(outcomes, n_classes)
    raise ConfigError(f"a chi={chi} root cannot read out {n_classes} classes directly")


@dataclass
class TTNModel:
    topology: TreeTopology
    params: np.ndarray  # (layers,) or (n_nodes,) x (chi^4 - 1)
    tied: bool = False
    readout: ReadoutSpec = field(default_factory=ReadoutSpec)

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=float)
        n_vec = self.topology.layers if self.tied else self.topology.n_nodes
        d = self.topology.chi ** 2
        if self.params.shape != (n_vec, d * d - 1):
            raise ConfigError(
                f"expected parameters of shape {(n_vec, d * d - 1)}, got {self.params.shape}"
            )
        self.readout.validate(self.topology.chi)
        if self.full_root and self.topology.n_nodes == 0:
            raise ConfigError("a chi^2 outcome map needs at least one node")

    @property
    def chi(self) -> int:
        return self.topology.chi

    @property
    def full_root(self) -> bool:
        """Whether the root node keeps both output subsystems for readout."""
        return self.readout.root_dim(self.chi) != self.chi

    @property
    def root_dim(self) -> int:
        return self.readout.root_dim(self.chi)

    def param_index(self, node: int) -> int:
        layer, _ = self.topology.node_position(node)
        return layer if self.tied else node

    def layer_param_slice(self, layer: int) -> np.ndarray:
        if self.tied:
            return self.params[layer : layer + 1]
        off = self.topology.layer_offset(layer)
        return self.params[off : off + self.topology.layer_size(layer)]

    def copy(self) -> "TTNModel":
        return TTNModel(self.topology, self.params.copy(), self.tied, self.readout)

    def untied(self) -> "TTNModel":
        """Equivalent model with one parameter vector per node."""
        if not self.tied:
            return self.copy()
        rows = [self.params[self.param_index(n)] for n in range(self.topology.n_nodes)]
        params = np.array(rows).reshape(self.topology.n_nodes, -1)
        return TTNModel(self.topology, params, False, self.readout)


def init_ttn(topology: TreeTopology, tied: bool, rng: np.random.Generator,
             readout: ReadoutSpec | None = None) -> TTNModel:
    """Parameters of Haar-random node unitaries (one per parameter vector)."""
    d = topology.chi ** 2
    n_vec = topology.layers if tied else topology.n_nodes
    params = np.zeros((n_vec, d * d - 1))
    for k in range(n_vec):
        h = qcore.principal_log_unitary(qcore.sample_cue(d, rng))
        params[k] = qcore.params_from_herm(h)
    return TTNModel(topology, params, tied, readout or ReadoutSpec())


def identity_ttn(topology: TreeTopology, tied: bool = False,
                 readout: ReadoutSpec | None = None) -> TTNModel:
    d = topology.chi ** 2
    n_vec = topology.layers if tied else topology.n_nodes
    return TTNModel(topology, np.zeros((n_vec, d * d - 1)), tied, readout or ReadoutSpec())


class LayerUnitaries:
    """Node unitaries per layer plus the eigendata of their generators."""

    def __init__(self, model: TTNModel):
        d = model.chi ** 2
        self.unitaries = []
        self.eig = []
        for layer in range(model.topology.layers):
            h = qcore.herm_from_params(model.layer_param_slice(layer), d)
            u, eig = qcore.expm_hermitian(h, return_eig=True)
            self.unitaries.append(u)
            self.eig.append(eig)


def _check_leaves(model: TTNModel, leaves: np.ndarray) -> None:
    chi = model.chi
    if leaves.ndim < 3 or leaves.shape[-2:] != (chi, chi):
        raise DomainError(f"leaves must have shape (..., L, {chi}, {chi}), got {leaves.shape}")
    if leaves.shape[-3] != model.topology.leaves:
        raise DomainError(
            f"got {leaves.shape[-3]} leaves, topology has {model.topology.leaves}"
        )


def _forward(units: LayerUnitaries, leaves: np.ndarray, keep: bool, full_root: bool = False):
    """Run all layers; with ``keep`` also return the per-layer (A, B) inputs."""
    state = leaves
    trace = []
    n_layers = len(units.unitaries)
    for layer, u in enumerate(units.unitaries):
        a = state[..., 0::2, :, :]
        b = state[..., 1::2, :, :]
        if keep:
            trace.append((a, b))
        if full_root and layer == n_layers - 1:
            state = u @ qcore.kron(a, b) @ np.swapaxes(u, -1, -2).conj()
        else:
            state = qcore.apply_node(u, a, b)
    return state[..., 0, :, :], trace


def contract(model: TTNModel, leaves, workers: int | None = None,
             chunk: int = DEFAULT_CHUNK) -> np.ndarray:
    """Root density matrix for one example (L, chi, chi) or a batch (N, L, chi, chi).

    The root is chi-dimensional unless the readout measures the full chi^2
    output of the root node. Batches are processed in chunks of ``chunk`` examples, on ``workers``
    threads if given; results are concatenated in input order.
    """
    leaves = np.asarray(leaves, dtype=complex)
    _check_leaves(model, leaves)
    units = LayerUnitaries(model)
    if leaves.ndim == 3:
        return _forward(units, leaves, keep=False, full_root=model.full_root)[0]
    n = leaves.shape[0]
    pieces = [leaves[i : i + chunk] for i in range(0, n, chunk)] or [leaves]
    run = lambda part: _forward(units, part, False, model.full_root)[0]  # noqa: E731
    if workers and workers > 1 and len(pieces) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            roots = list(pool.map(run, pieces))
    else:
        roots = [run(p) for p in pieces]
    return np.concatenate(roots, axis=0)


def readout_probs(root, spec: ReadoutSpec) -> np.ndarray:
    """Per-class probabilities from the root state(s), shape (..., n_classes)."""
    root = np.asarray(root)
    chi = root.shape[-1]
    cls = spec.class_of_outcome(chi)
    diag = np.real(np.diagonal(root, axis1=-2, axis2=-1))
    out = np.zeros(diag.shape[:-1] + (spec.n_classes,))
    for c in range(spec.n_classes):
        out[..., c] = diag[..., cls == c].sum(axis=-1)
    return out


@dataclass
class Backward:
    """Result of a reverse pass through the tree.

    ``node_grads`` holds, per node, the matrix ``Z`` with ``df = 2 Re tr(Z dU)``
    summed over the batch. ``leaf_adjoints`` has ``df = tr(G dleaf)`` per example.
    """

    node_grads: list  # per layer: (n_layer, chi^2, chi^2)
    leaf_adjoints: np.ndarray | None


def _adjoint_below(u, a, b, gx):
    """Pull the adjoint ``gx`` of ``U M U^dagger`` back onto the interleaved inputs."""
    chi = a.shape[-1]
    udag = np.swapaxes(u, -1, -2).conj()
    gm = (udag @ gx @ u).reshape(gx.shape[:-2] + (chi,) * 4)
    ga = np.einsum("...abcd,...db->...ac", gm, b)
    gb = np.einsum("...abcd,...ca->...bd", gm, a)
    out = np.empty(ga.shape[:-3] + (2 * ga.shape[-3], chi, chi), dtype=complex)
    out[..., 0::2, :, :] = ga
    out[..., 1::2, :, :] = gb
    return out


def _expand_adjoint(g, model: TTNModel, layer: int):
    """Adjoint of a node's pre-trace state ``U M U^dagger`` from that of its output."""
    if model.full_root and layer == model.topology.layers - 1:
        return g
    return qcore.kron(g, np.eye(model.chi))


def backward(model: TTNModel, units: LayerUnitaries, trace, root_adjoint,
             need_leaves: bool = True) -> Backward:
    g = np.asarray(root_adjoint, dtype=complex)[..., None, :, :]
    grads = [None] * len(units.unitaries)
    for layer in reversed(range(len(units.unitaries))):
        u = units.unitaries[layer]
        a, b = trace[layer]
        gx = _expand_adjoint(g, model, layer)
        z = qcore.kron(a, b) @ np.swapaxes(u, -1, -2).conj() @ gx
        grads[layer] = z.sum(axis=0) if z.ndim == 4 else z
        if layer > 0 or need_leaves:
            g = _adjoint_below(u, a, b, gx)
    return Backward(grads, g if need_leaves else None)


def frechet_param_grad(z: np.ndarray, eig) -> np.ndarray:
    """Gradient w.r.t. generator coefficients given ``df = 2 Re tr(Z dU)``, U = exp(iH).

    ``z`` and the eigendata may carry a leading stack axis.
    """
    lam, vec = eig
    d = lam.shape[-1]
    diff = lam[..., :, None] - lam[..., None, :]
    mean = 0.5 * (lam[..., :, None] + lam[..., None, :])
    # divided differences of exp(i lambda), exact on the diagonal
    f = 1j * np.exp(1j * mean) * np.sinc(diff / (2 * np.pi))
    vdag = np.swapaxes(vec, -1, -2).conj()
    a = vdag @ z @ vec
    w = vec @ (a * np.swapaxes(f, -1, -2)) @ vdag
    basis = qcore.gell_mann_basis(d)
    return 2.0 * np.einsum("...ij,kji->...k", w, basis).real


def param_gradient(model: TTNModel, units: LayerUnitaries, node_grads) -> np.ndarray:
    """Assemble the gradient array matching ``model.params``."""
    out = np.zeros_like(model.params)
    for layer, z in enumerate(node_grads):
        lam, vec = units.eig[layer]
        if model.tied:
            g = frechet_param_grad(z, (np.broadcast_to(lam, (z.shape[0],) + lam.shape[1:]),
                                       np.broadcast_to(vec, (z.shape[0],) + vec.shape[1:])))
            out[layer] = g.sum(axis=0)
        else:
            off = model.topology.layer_offset(layer)
            out[off : off + z.shape[0]] = frechet_param_grad(z, (lam, vec))
    return out


def _node_inputs_and_adjoint(model: TTNModel, leaves: np.ndarray, node: int, root_adjoint):
    """Node input ``M = A (x) B`` and output adjoint ``G (x) I`` for every example."""
    units = LayerUnitaries(model)
    _, trace = _forward(units, leaves, keep=True, full_root=model.full_root)
    layer, pos = model.topology.node_position(node)
    g = np.asarray(root_adjoint, dtype=complex)[..., None, :, :]
    for lay in reversed(range(layer + 1, model.topology.layers)):
        a, b = trace[lay]
        g = _adjoint_below(units.unitaries[lay], a, b, _expand_adjoint(g, model, lay))
    a, b = trace[layer]
    m = qcore.kron(a[..., pos, :, :], b[..., pos, :, :])
    gx = _expand_adjoint(g, model, layer)[..., pos, :, :]
    return m, gx


def environment(model: TTNModel, leaves, node: int, class_label) -> np.ndarray:
    """Quadratic form ``V`` of one node, shape (chi^4, chi^4).

    With ``u = U.ravel()`` the probability of ``class_label`` (summed over a
    batch when ``leaves`` is (N, L, chi, chi) and ``class_label`` is (N,)) is
    ``u @ V @ u.conj()``, and ``V`` does not depend on the node's own unitary.
    """
    leaves = np.asarray(leaves, dtype=complex)
    _check_leaves(model, leaves)
    if not 0 <= node < model.topology.n_nodes:
        raise DomainError(f"node id {node} outside [0, {model.topology.n_nodes})")
    proj = model.readout.projectors(model.root_dim)
    labels = np.asarray(class_label)
    root_adj = proj[labels].astype(complex)
    return environment_from_adjoint(model, leaves, node, root_adj)


def environment_from_adjoint(model: TTNModel, leaves: np.ndarray, node: int,
                             root_adjoint) -> np.ndarray:
    m, gx = _node_inputs_and_adjoint(model, leaves, node, root_adjoint)
    d = model.chi ** 2
    if m.ndim == 2:
        v = np.einsum("ca,bd->abcd", gx, m)
    else:
        v = np.einsum("nca,nbd->abcd", gx, m)
    return v.reshape(d * d, d * d)


def environment_value(v: np.ndarray, u: np.ndarray) -> float:
    vec = np.asarray(u).ravel()
    return float(np.real(vec @ v @ vec.conj()))


def environment_grad_matrix(v: np.ndarray, u: np.ndarray) -> np.ndarray:
    """``Z`` with ``d(u V u*) = 2 Re tr(Z dU)``."""
    d = u.shape[0]
    v4 = v.reshape(d, d, d, d)
    return np.einsum("abcd,cd->ba", v4, u.conj())
