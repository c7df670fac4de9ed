"""Complex linear-algebra and quantum primitives.

Matrices are plain ``numpy`` arrays (``complex128``). Functions that act on
density matrices also accept stacks with arbitrary leading batch axes unless
stated otherwise.
"""

from __future__ import annotations

import warnings
from functools import lru_cache

import numpy as np

from qksttn.errors import DomainError, ParameterShapeError

HERMITIAN_TOL = 1e-10
BRANCH_CUT_TOL = 1e-9


@lru_cache(maxsize=None)
def gell_mann_basis(d: int) -> np.ndarray:
    """Generalized Gell-Mann matrices for dimension ``d``, shape (d*d-1, d, d).

    Ordering: symmetric off-diagonal pairs (j<k, lexicographic), then
    antisymmetric pairs in the same order, then the d-1 diagonal elements.
    All generators satisfy ``tr(T_a T_b) = 2 delta_ab``.
    """
    if d < 1:
        raise DomainError(f"dimension must be positive, got {d}")
    pairs = [(j, k) for j in range(d) for k in range(j + 1, d)]
    mats = []
    for j, k in pairs:
        m = np.zeros((d, d), dtype=complex)
        m[j, k] = m[k, j] = 1.0
        mats.append(m)
    for j, k in pairs:
        m = np.zeros((d, d), dtype=complex)
        m[j, k] = -1j
        m[k, j] = 1j
        mats.append(m)
    for l in range(1, d):
        m = np.zeros((d, d), dtype=complex)
        coef = np.sqrt(2.0 / (l * (l + 1)))
        m[np.arange(l), np.arange(l)] = coef
        m[l, l] = -l * coef
        mats.append(m)
    basis = np.array(mats, dtype=complex).reshape(d * d - 1, d, d)
    basis.setflags(write=False)
    return basis


def n_generators(d: int) -> int:
    return d * d - 1


def herm_from_params(v, d: int) -> np.ndarray:
    """Traceless Hermitian matrix ``sum_k v[k] T_k``.

    ``v`` may carry leading batch axes; the last axis must have length d*d-1.
    """
    v = np.asarray(v, dtype=float)
    if v.shape[-1:] != (d * d - 1,):
        raise ParameterShapeError(
            f"expected {d * d - 1} generator coefficients for d={d}, got shape {v.shape}"
        )
    return np.tensordot(v, gell_mann_basis(d), axes=([-1], [0]))


def params_from_herm(h) -> np.ndarray:
    """Coefficients of the traceless part of Hermitian ``h`` in the Gell-Mann basis."""
    h = np.asarray(h)
    d = h.shape[-1]
    basis = gell_mann_basis(d)
    # tr(H T_k) / 2, real because both are Hermitian
    return 0.5 * np.einsum("...ij,kji->...k", h, basis).real


def is_hermitian(a, tol: float = HERMITIAN_TOL) -> bool:
    a = np.asarray(a)
    return a.shape[-1] == a.shape[-2] and bool(
        np.all(np.abs(a - np.swapaxes(a, -1, -2).conj()) <= tol)
    )


def expm_hermitian(h, return_eig: bool = False):
    """Unitary ``exp(iH)`` from the eigendecomposition of Hermitian ``H``.

    With ``return_eig=True`` also returns ``(eigenvalues, eigenvectors)`` so
    the caller can reuse them for the Frechet derivative.
    """
    h = np.asarray(h, dtype=complex)
    if not is_hermitian(h):
        raise DomainError("expm_hermitian requires a Hermitian matrix")
    h = 0.5 * (h + np.swapaxes(h, -1, -2).conj())
    lam, vec = np.linalg.eigh(h)
    u = (vec * np.exp(1j * lam)[..., None, :]) @ np.swapaxes(vec, -1, -2).conj()
    if return_eig:
        return u, (lam, vec)
    return u


def unitary_from_params(v, d: int) -> np.ndarray:
    return expm_hermitian(herm_from_params(v, d))


def kron(a, b) -> np.ndarray:
    """Kronecker product, batched over matching leading axes."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim == 2 and b.ndim == 2:
        return np.kron(a, b)
    ra, ca = a.shape[-2:]
    rb, cb = b.shape[-2:]
    out = a[..., :, None, :, None] * b[..., None, :, None, :]
    return out.reshape(out.shape[:-4] + (ra * rb, ca * cb))


def partial_trace(rho, keep: str, dim_a: int, dim_b: int) -> np.ndarray:
    """Reduced state of a bipartite ``rho`` over A (x) B.

    ``keep="A"`` returns Tr_B(rho), ``keep="B"`` returns Tr_A(rho).
    """
    rho = np.asarray(rho)
    n = dim_a * dim_b
    if rho.shape[-2:] != (n, n):
        raise DomainError(
            f"state of shape {rho.shape[-2:]} is not over a {dim_a}x{dim_b} bipartition"
        )
    t = rho.reshape(rho.shape[:-2] + (dim_a, dim_b, dim_a, dim_b))
    if keep in ("A", "a", 0):
        return np.einsum("...abcb->...ac", t)
    if keep in ("B", "b", 1):
        return np.einsum("...abad->...bd", t)
    raise DomainError(f"keep must be 'A' or 'B', got {keep!r}")


def apply_node(u, rho_a, rho_b) -> np.ndarray:
    """Tr_B[U (rho_a (x) rho_b) U^dagger]: the first subsystem survives.

    ``u`` has shape (..., chi^2, chi^2) and broadcasts against the states.
    """
    rho_a = np.asarray(rho_a)
    rho_b = np.asarray(rho_b)
    chi = rho_a.shape[-1]
    if rho_b.shape[-1] != chi or np.shape(u)[-1] != chi * chi:
        raise DomainError(
            f"node of size {np.shape(u)[-1]} cannot act on states of sizes "
            f"{rho_a.shape[-1]} and {rho_b.shape[-1]}"
        )
    m = kron(rho_a, rho_b)
    x = u @ m @ np.swapaxes(u, -1, -2).conj()
    return partial_trace(x, "A", chi, chi)


def sample_cue(dim: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-random unitary: QR of a complex Ginibre matrix with phase fix."""
    if dim < 1:
        raise DomainError(f"dimension must be >= 1, got {dim}")
    z = (rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))) / np.sqrt(2.0)
    q, r = np.linalg.qr(z)
    diag = np.diagonal(r)
    q = q * (diag / np.abs(diag))[None, :]
    return q


def principal_log_unitary(u) -> np.ndarray:
    """Traceless Hermitian ``H`` with ``exp(iH) = U`` up to a global phase.

    Eigenphases are taken in (-pi, pi]. Phases sitting on the branch cut are
    moved to +pi, with a warning. The global phase ``tr(H)/d`` is dropped;
    for ``det U = 1`` with phases away from the cut the result is exact.
    """
    import scipy.linalg

    u = np.asarray(u, dtype=complex)
    d = u.shape[0]
    # complex Schur form of a normal matrix is diagonal with unitary Z
    t, z = scipy.linalg.schur(u, output="complex")
    phases = np.angle(np.diagonal(t))
    near_cut = np.abs(phases + np.pi) <= BRANCH_CUT_TOL
    if np.any(near_cut):
        warnings.warn("eigenphase on the -pi branch cut; mapped to +pi", RuntimeWarning)
        phases = np.where(near_cut, np.pi, phases)
    h = (z * phases[None, :]) @ z.conj().T
    h = 0.5 * (h + h.conj().T)
    return h - np.trace(h).real / d * np.eye(d)


def check_density_matrix(rho, tol_herm: float = 1e-12, tol_trace: float = 1e-12,
                         tol_eig: float = 1e-10) -> None:
    """Raise ``DomainError`` unless ``rho`` (or each matrix in a stack) is a valid state."""
    rho = np.asarray(rho)
    if not np.all(np.isfinite(rho)):
        raise DomainError("density matrix has non-finite entries")
    if np.max(np.abs(rho - np.swapaxes(rho, -1, -2).conj()), initial=0.0) > tol_herm:
        raise DomainError("density matrix is not Hermitian")
    tr = np.trace(rho, axis1=-2, axis2=-1)
    if np.max(np.abs(tr - 1.0), initial=0.0) > tol_trace:
        raise DomainError("density matrix does not have unit trace")
    herm = 0.5 * (rho + np.swapaxes(rho, -1, -2).conj())
    if np.min(np.linalg.eigvalsh(herm), initial=0.0) < -tol_eig:
        raise DomainError("density matrix has negative eigenvalues")


def unitarity_error(u) -> float:
    u = np.asarray(u)
    eye = np.eye(u.shape[-1])
    return float(np.max(np.abs(np.swapaxes(u, -1, -2).conj() @ u - eye)))
