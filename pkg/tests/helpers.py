"""Shared builders for random test instances."""

import numpy as np

from qksttn import encoding, ttn


def random_density(d, rng):
    a = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    rho = a @ a.conj().T
    return rho / np.trace(rho).real


def random_instance(E, chi, rng, p=5, tied=False, readout=None):
    enc = encoding.init_encoding(E, p, p, 1.0, rng)
    model = ttn.init_ttn(ttn.build_topology(E, chi), tied, rng, readout)
    return enc, model


def balanced_batch(n, p, n_classes, rng):
    X = rng.random((n, p))
    y = np.arange(n) % n_classes
    return X, y


def is_density(rho, tol=1e-10):
    herm = np.max(np.abs(rho - rho.conj().T)) <= tol
    trace = abs(np.trace(rho) - 1) <= tol
    psd = np.linalg.eigvalsh((rho + rho.conj().T) / 2).min() >= -tol
    return herm and trace and psd


def fd_check(analytic, func, x, h=1e-5, rtol=1e-5, floor=1e-8):
    """Central differences over every coordinate of ``x`` (modified in place and restored)."""
    flat = x.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = func()
        flat[i] = old - h
        down = func()
        flat[i] = old
        fd = (up - down) / (2 * h)
        assert abs(analytic.reshape(-1)[i] - fd) <= max(rtol * abs(fd), floor), (i, analytic.reshape(-1)[i], fd)


# filled by test_acceptance.py, printed in the terminal summary by conftest.py
ACCEPTANCE = []
