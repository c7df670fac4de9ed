"""Quantum-kitchen-sink feature maps.

Each episode ``e`` turns an input ``x`` into a rotation angle
``theta_e = omega[e] @ x + beta[e]`` and prepares ``R_y(theta_e)|0>``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from qksttn.errors import ConfigError, DomainError
from qksttn.qcore import kron

EXACT = "exact"


@dataclass
class EncodingParams:
    omega: np.ndarray  # (E, p), radians per unit feature
    beta: np.ndarray  # (E,)
    mask: np.ndarray  # (E, p) bool, False entries of omega are pinned to 0
    sigma: float

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=float)
        self.beta = np.asarray(self.beta, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.omega.ndim != 2 or self.omega.shape[0] < 1 or self.omega.shape[1] < 1:
            raise ConfigError(f"omega must be a non-empty E x p matrix, got {self.omega.shape}")
        if self.mask.shape != self.omega.shape or self.beta.shape != (self.omega.shape[0],):
            raise ConfigError("omega, mask and beta shapes disagree")
        if np.any(self.omega[~self.mask] != 0.0):
            raise ConfigError("omega has nonzero entries outside its sparsity mask")

    @property
    def E(self) -> int:
        return self.omega.shape[0]

    @property
    def p(self) -> int:
        return self.omega.shape[1]

    @property
    def nonzeros(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    def copy(self) -> "EncodingParams":
        return EncodingParams(self.omega.copy(), self.beta.copy(), self.mask.copy(), self.sigma)


def init_encoding(E: int, p: int, r: int, sigma: float, rng: np.random.Generator) -> EncodingParams:
    """Random encoding with exactly ``r`` nonzero weights per episode."""
    if E < 1 or p < 1:
        raise ConfigError(f"need E >= 1 and p >= 1, got E={E}, p={p}")
    if not 1 <= r <= p:
        raise ConfigError(f"nonzeros per episode r={r} outside [1, {p}]")
    if sigma <= 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    mask = np.zeros((E, p), dtype=bool)
    if r == p:
        mask[:] = True
    else:
        for e in range(E):
            mask[e, rng.choice(p, size=r, replace=False)] = True
    omega = np.where(mask, rng.normal(0.0, sigma, size=(E, p)), 0.0)
    beta = rng.uniform(0.0, 2 * np.pi, size=E)
    return EncodingParams(omega, beta, mask, float(sigma))


def angles(enc: EncodingParams, x) -> np.ndarray:
    """Rotation angles; ``x`` is one input (p,) or a batch (N, p)."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != enc.p:
        raise DomainError(f"input has {x.shape[-1]} features, encoding expects {enc.p}")
    return x @ enc.omega.T + enc.beta


def episode_state(theta) -> np.ndarray:
    """R_y(theta)|0><0|R_y(theta)^dagger as a real 2x2 matrix (batched over theta)."""
    theta = np.asarray(theta, dtype=float)
    c = np.cos(theta / 2)
    s = np.sin(theta / 2)
    out = np.empty(theta.shape + (2, 2))
    out[..., 0, 0] = c * c
    out[..., 0, 1] = out[..., 1, 0] = c * s
    out[..., 1, 1] = s * s
    return out


def episode_state_derivative(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    out = np.empty(theta.shape + (2, 2))
    half_sin = 0.5 * np.sin(theta)
    out[..., 0, 0] = -half_sin
    out[..., 0, 1] = out[..., 1, 0] = 0.5 * np.cos(theta)
    out[..., 1, 1] = half_sin
    return out


def group_episodes(states: np.ndarray, chi: int) -> np.ndarray:
    """Combine per-episode 2x2 states (..., E, 2, 2) into leaves (..., E/lg chi, chi, chi)."""
    E = states.shape[-3]
    if chi == 2:
        return states.astype(complex)
    if chi == 4:
        if E % 2:
            raise ConfigError(f"E={E} is not divisible by lg(chi)=2")
        return kron(states[..., 0::2, :, :], states[..., 1::2, :, :]).astype(complex)
    raise ConfigError(f"bond dimension must be 2 or 4, got {chi}")


def leaf_states(enc: EncodingParams, x, chi: int) -> np.ndarray:
    """Leaf density matrices for one input (leaves, chi, chi) or a batch (N, leaves, chi, chi)."""
    if chi not in (2, 4):
        raise ConfigError(f"bond dimension must be 2 or 4, got {chi}")
    if chi == 4 and enc.E % 2:
        raise ConfigError(f"E={enc.E} is not divisible by lg(chi)=2")
    return group_episodes(episode_state(angles(enc, x)), chi)


def sample_outcomes(rho, shots, rng: np.random.Generator | None = None) -> np.ndarray:
    """Computational-basis outcome frequencies of ``rho``.

    ``shots=EXACT`` returns the diagonal itself (the infinite-shot limit).
    """
    rho = np.asarray(rho)
    probs = np.clip(np.real(np.diagonal(rho, axis1=-2, axis2=-1)), 0.0, None)
    probs = probs / probs.sum(axis=-1, keepdims=True)
    if shots == EXACT:
        return probs
    shots = int(shots)
    if shots < 1:
        raise DomainError(f"shots must be >= 1 or EXACT, got {shots}")
    if rng is None:
        raise DomainError("finite-shot sampling needs a random generator")
    counts = rng.multinomial(shots, probs.reshape(-1, probs.shape[-1]))
    return (counts / shots).reshape(probs.shape)
