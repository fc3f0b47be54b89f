"""Random instance generators and independent oracles shared by the tests."""

from __future__ import annotations

import numpy as np
from scipy.stats import ortho_group

from orbitcont.cis import factorize


def positive(z: complex) -> bool:
    return z.real > 0


def random_orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    return ortho_group.rvs(n, random_state=rng) if n > 1 else np.ones((1, 1))


def _blocks(rng: np.random.Generator, size: int, sign: float, allow_complex: bool) -> list:
    out = []
    left = size
    while left > 0:
        if allow_complex and left >= 2 and rng.random() < 0.3:
            re = sign * rng.uniform(0.5, 3.0)
            im = rng.uniform(0.3, 2.0)
            out.append(np.array([[re, im], [-im, re]]))
            left -= 2
        else:
            out.append(np.array([[sign * rng.uniform(0.5, 3.0)]]))
            left -= 1
    return out


def split_matrix(rng: np.random.Generator, n: int, m: int, *, nonnormal: float = 0.5,
                 allow_complex: bool = True) -> np.ndarray:
    """Random ``n x n`` matrix with exactly ``m`` eigenvalues in the right half plane."""
    blocks = _blocks(rng, m, 1.0, allow_complex) + _blocks(rng, n - m, -1.0, allow_complex)
    D = np.zeros((n, n))
    i = 0
    for b in blocks:
        k = b.shape[0]
        D[i:i + k, i:i + k] = b
        i += k
    D += nonnormal * np.triu(rng.standard_normal((n, n)), 1) * (np.abs(D) == 0)
    Q = random_orthogonal(rng, n)
    return Q @ D @ Q.T


def eig_subspace(A: np.ndarray, select=positive) -> np.ndarray:
    """Orthonormal basis of the selected eigenvectors (real and imaginary parts)."""
    w, V = np.linalg.eig(A)
    cols = []
    for k in np.nonzero([select(complex(z)) for z in w])[0]:
        cols.append(V[:, k].real)
        if abs(w[k].imag) > 0:
            cols.append(V[:, k].imag)
    M = np.array(cols).T
    U, s, _ = np.linalg.svd(M, full_matrices=False)
    r = int(np.sum(s > 1e-10 * s[0]))
    return U[:, :r]


def principal_sine(Qa: np.ndarray, Qb: np.ndarray) -> float:
    """Largest principal-angle sine through orthogonal projectors (SVD oracle)."""
    Pa = Qa @ Qa.T
    Pb = Qb @ Qb.T
    return float(np.linalg.norm(Pa - Pb, 2))


def split_instance(rng: np.random.Generator, n: int, m: int, **kw):
    A0 = split_matrix(rng, n, m, **kw)
    F0 = factorize(A0, positive)
    B = rng.standard_normal((n, n))
    B /= np.linalg.norm(B)
    return A0, F0, B
