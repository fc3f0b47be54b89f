"""Dense kernels for small matrices: ordered real Schur forms, Sylvester
solves and the spectral separation ``sep``.

Dimensions here are those of equilibrium Jacobians (n of order 10), so
``sep`` is computed exactly from the Kronecker form instead of estimated.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np
from scipy.linalg import lapack

from .errors import (
    ClassificationError,
    SchurConvergenceError,
    SwapError,
    SylvesterSingularError,
)
from .settings import DEFAULT, Tolerances

__all__ = [
    "SchurForm",
    "SylvesterOperator",
    "FlopCounter",
    "flop_counter",
    "real_schur",
    "order_schur",
    "solve_sylvester",
    "sep",
    "smallest_singular_value",
    "schur_blocks",
]


# ---------------------------------------------------------------------------
# flop instrumentation

class FlopCounter:
    """Accumulates textbook operation counts of the kernels called while active."""

    def __init__(self) -> None:
        self.total = 0.0
        self.by_kernel: dict[str, float] = {}

    def add(self, kernel: str, flops: float) -> None:
        self.total += flops
        self.by_kernel[kernel] = self.by_kernel.get(kernel, 0.0) + flops


_ACTIVE: contextvars.ContextVar[FlopCounter | None] = contextvars.ContextVar(
    "orbitcont_flops", default=None)


@contextlib.contextmanager
def flop_counter() -> Iterator[FlopCounter]:
    counter = FlopCounter()
    token = _ACTIVE.set(counter)
    try:
        yield counter
    finally:
        _ACTIVE.reset(token)


def count(kernel: str, flops: float) -> None:
    counter = _ACTIVE.get()
    if counter is not None:
        counter.add(kernel, flops)


def matmul(*mats: np.ndarray) -> np.ndarray:
    """Chained product that reports 2mkn flops per multiplication."""
    out = mats[0]
    for b in mats[1:]:
        count("gemm", 2.0 * out.shape[0] * out.shape[1] * b.shape[-1])
        out = out @ b
    return out


# ---------------------------------------------------------------------------
# Schur forms

def schur_blocks(T: np.ndarray) -> list[tuple[int, int]]:
    """(start, size) of the diagonal blocks of a quasi-triangular matrix."""
    n = T.shape[0]
    blocks = []
    i = 0
    while i < n:
        if i + 1 < n and T[i + 1, i] != 0.0:
            blocks.append((i, 2))
            i += 2
        else:
            blocks.append((i, 1))
            i += 1
    return blocks


def _block_eigs(T: np.ndarray, start: int, size: int) -> np.ndarray:
    if size == 1:
        return np.array([complex(T[start, start])])
    B = T[start:start + 2, start:start + 2]
    w = np.linalg.eigvals(B).astype(complex)
    # keep the positive-imaginary member first
    return w[np.argsort(-w.imag)]


@dataclass(frozen=True)
class SchurForm:
    """``A = Q T Q^T`` with ``T`` quasi-upper-triangular."""

    Q: np.ndarray
    T: np.ndarray

    @property
    def n(self) -> int:
        return self.T.shape[0]

    @property
    def blocks(self) -> list[tuple[int, int]]:
        return schur_blocks(self.T)

    @property
    def eigenvalues(self) -> np.ndarray:
        """Diagonal-order eigenvalues; complex pairs are adjacent."""
        if self.n == 0:
            return np.zeros(0, dtype=complex)
        return np.concatenate([_block_eigs(self.T, s, k) for s, k in self.blocks])

    def reconstruct(self) -> np.ndarray:
        return self.Q @ self.T @ self.Q.T


def _check_square(A: np.ndarray, name: str = "A") -> np.ndarray:
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"{name} must be square, got shape {A.shape}")
    if A.shape[0] == 0:
        raise ValueError(f"{name} must have positive dimension")
    if not np.all(np.isfinite(A)):
        raise ValueError(f"{name} has non-finite entries")
    return A


def real_schur(A: np.ndarray) -> SchurForm:
    """Real Schur factorization via LAPACK ``dgees`` (Hessenberg QR)."""
    A = _check_square(A)
    n = A.shape[0]
    t, _sdim, _wr, _wi, vs, _work, info = lapack.dgees(
        lambda wr, wi: 0, A, compute_v=1, sort_t=0, lwork=max(1, 6 * n))
    if info != 0:
        raise SchurConvergenceError(info)
    count("schur", 25.0 * n**3)
    # exact zeros below the quasi-triangular profile
    T = np.triu(t, -1)
    for s, k in schur_blocks(T):
        if k == 1 and s + 1 < n:
            T[s + 1, s] = 0.0
    return SchurForm(Q=np.array(vs), T=T)


EigenClassifier = Callable[[complex], bool]


def order_schur(
    S: SchurForm,
    select: EigenClassifier,
    key: Callable[[complex], float] | None = None,
    tol: Tolerances = DEFAULT,
) -> tuple[SchurForm, int]:
    """Reorder ``S`` so the selected eigenvalues lead the diagonal.

    Within each group blocks are sorted by ``key`` (ascending), which yields
    the nested invariant subspaces spanned by the leading Schur vectors.
    Complex pairs move as a unit and must be classified identically.

    Returns the reordered form and the dimension of the selected subspace.
    """
    key = key or (lambda lam: 0.0)
    T = np.array(S.T, dtype=float, order="F")
    Q = np.array(S.Q, dtype=float, order="F")
    n = T.shape[0]
    reference = S.reconstruct()

    def classify(start: int, size: int) -> tuple[bool, float]:
        w = _block_eigs(T, start, size)
        flags = {bool(select(complex(lam))) for lam in w}
        if len(flags) != 1:
            raise ClassificationError(
                f"selector splits the complex pair {w[0]:.6g}, {w[1]:.6g}")
        return flags.pop(), float(key(complex(w[0])))

    pos = 0
    m = 0
    while pos < n:
        candidates = []
        for start, size in schur_blocks(T):
            if start < pos:
                continue
            chosen, k = classify(start, size)
            candidates.append(((not chosen, k, start), start, size, chosen))
        _, start, size, chosen = min(candidates)
        if start != pos:
            T, Q, info = lapack.dtrexc(T, Q, start + 1, pos + 1)
            if info != 0:
                raise SwapError(f"dtrexc refused to move block at row {start} to {pos}")
            count("trexc", 12.0 * n * (start - pos) * size)
        # a 2x2 block could split during the move; re-read the structure
        new_size = 2 if (pos + 1 < n and T[pos + 1, pos] != 0.0) else 1
        if chosen:
            m += new_size
        pos += new_size

    T = np.triu(T, -1)
    for s, k in schur_blocks(T):
        if k == 1 and s + 1 < n:
            T[s + 1, s] = 0.0
    out = SchurForm(Q=np.ascontiguousarray(Q), T=np.ascontiguousarray(T))
    orth = np.linalg.norm(out.Q.T @ out.Q - np.eye(n))
    if orth > tol.orthogonality * n * 10:
        raise SwapError(f"orthogonality lost during reordering ({orth:.2e})")
    scale = max(np.linalg.norm(reference), 1.0)
    rec = np.linalg.norm(out.reconstruct() - reference)
    if rec > tol.reconstruction * scale:
        raise SwapError(f"reordering changed the matrix by {rec:.2e}")
    return out, m


# ---------------------------------------------------------------------------
# separation and Sylvester equations

def smallest_singular_value(M: np.ndarray) -> float:
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        return 0.0
    return float(np.linalg.svd(M, compute_uv=False).min())


def sep(A: np.ndarray, B: np.ndarray) -> float:
    """Smallest singular value of ``Y -> B Y - Y A`` (exact, via Kronecker SVD)."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.shape[0] != A.shape[1] or B.shape[0] != B.shape[1]:
        raise ValueError("sep needs square arguments")
    p, q = A.shape[0], B.shape[0]
    K = np.kron(np.eye(p), B) - np.kron(A.T, np.eye(q))
    return smallest_singular_value(K)


class SylvesterOperator:
    """Factored solver for ``A X - X B = C`` (Bartels-Stewart with LAPACK ``trsyl``).

    The Schur factors of ``A`` and ``B`` are computed once and reused for every
    right-hand side; previously computed factors can be passed in.
    """

    def __init__(
        self,
        A: np.ndarray,
        B: np.ndarray,
        *,
        schur_a: SchurForm | None = None,
        schur_b: SchurForm | None = None,
        check: bool = True,
        tol: Tolerances = DEFAULT,
    ) -> None:
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.B = np.atleast_2d(np.asarray(B, dtype=float))
        if check:
            self.sep = sep(self.B, self.A)
            threshold = tol.sylvester_sep * (np.linalg.norm(self.A) + np.linalg.norm(self.B))
            if not self.sep > threshold:
                raise SylvesterSingularError(self.sep, threshold)
        else:
            self.sep = float("nan")
        self.schur_a = schur_a if schur_a is not None else real_schur(self.A)
        self.schur_b = schur_b if schur_b is not None else real_schur(self.B)

    def solve(self, C: np.ndarray) -> np.ndarray:
        C = np.atleast_2d(np.asarray(C, dtype=float))
        p, q = self.A.shape[0], self.B.shape[0]
        if C.shape != (p, q):
            raise ValueError(f"right-hand side has shape {C.shape}, expected {(p, q)}")
        Ua, Ub = self.schur_a.Q, self.schur_b.Q
        Ct = matmul(Ua.T, C, Ub)
        X, scale, info = lapack.dtrsyl(self.schur_a.T, self.schur_b.T, Ct, isgn=-1)
        count("trsyl", float(p * q * (p + q)))
        if info < 0:
            raise ValueError(f"dtrsyl argument {-info} invalid")
        if info == 1:
            raise SylvesterSingularError(self.sep, 0.0)
        return matmul(Ua, X / scale, Ub.T)


def solve_sylvester(A: np.ndarray, B: np.ndarray, C: np.ndarray,
                    tol: Tolerances = DEFAULT) -> np.ndarray:
    """Solve ``A X - X B = C`` for disjoint spectra of ``A`` and ``B``."""
    return SylvesterOperator(A, B, tol=tol).solve(C)
