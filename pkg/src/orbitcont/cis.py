"""Continuation of invariant subspaces (CIS).

Given a block Schur factorization ``A(0) = Q(0) T(0) Q(0)^T`` whose leading
``m`` columns span an invariant subspace, the factorization of a nearby
``A(s)`` is obtained as ``Q(s) = Q(0) U(s)`` where ``U`` is parametrized by
the solution ``Y`` of the algebraic Riccati equation

    F(Y) = T22 Y - Y T11 + E21 - Y T12 Y = 0

written in the coordinates of ``Q(0)``. ``Y`` is refined either by the
fixed-point ("simple") iteration or by Newton's method, started from zero or
from an Euler predictor obtained from the differential equation ``U' = U H``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np
from scipy.integrate import solve_ivp

from .errors import (
    BifurcationProximity,
    CisStepRejected,
    RefinementInsufficientError,
    RiccatiDivergenceError,
    SylvesterSingularError,
)
from .linalg import (
    SylvesterOperator,
    count,
    matmul,
    order_schur,
    real_schur,
    sep,
)
from .settings import DEFAULT, Tolerances

Method = Literal["simple", "newton"]
Guess = Literal["zero", "euler"]

__all__ = [
    "BlockSchurFactorization",
    "RiccatiData",
    "RiccatiSolution",
    "CisStepReport",
    "factorize",
    "form_riccati_data",
    "riccati_residual",
    "solve_riccati_simple",
    "solve_riccati_newton",
    "euler_initial_guess",
    "kappa",
    "kappa_tilde",
    "safeguard_alpha",
    "safeguard_check",
    "subspace_distance",
    "basis_distance",
    "assemble_step",
    "cis_step",
    "integrate_u_ode",
    "procrustes_baseline",
    "MethodStats",
    "compare_methods",
    "continue_subspace",
]


@dataclass(frozen=True)
class ShiftedBlocks:
    """Factored Sylvester operator of the last Newton step, kept for the next predictor.

    At a Riccati solution ``Y`` the new diagonal blocks satisfy
    ``T11(s) = R1 Tt11 R1^{-1}`` and ``T22(s) = R2^{-1} Tt22 R2`` with
    ``R1 = (I + Y^T Y)^{1/2}`` and ``R2 = (I + Y Y^T)^{1/2}``, so a Sylvester
    equation in ``T22(s), T11(s)`` reduces to one in the shifted blocks.
    """

    op: SylvesterOperator          # solves Tt22 Z - Z Tt11 = C
    r1: np.ndarray
    r1_inv: np.ndarray
    r2: np.ndarray
    r2_inv: np.ndarray

    def solve(self, C: np.ndarray) -> np.ndarray:
        Z = self.op.solve(matmul(self.r2, C, self.r1))
        return matmul(self.r2_inv, Z, self.r1_inv)


@dataclass(frozen=True)
class BlockSchurFactorization:
    """``A = Q T Q^T`` with ``T[m:, :m] == 0``; ``Q[:, :m]`` spans the continued subspace."""

    Q: np.ndarray
    T: np.ndarray
    m: int
    A: np.ndarray
    shifted: ShiftedBlocks | None = field(default=None, compare=False, repr=False)

    @property
    def n(self) -> int:
        return self.T.shape[0]

    @property
    def Q1(self) -> np.ndarray:
        return self.Q[:, :self.m]

    @property
    def Q2(self) -> np.ndarray:
        return self.Q[:, self.m:]

    @property
    def T11(self) -> np.ndarray:
        return self.T[:self.m, :self.m]

    @property
    def T12(self) -> np.ndarray:
        return self.T[:self.m, self.m:]

    @property
    def T22(self) -> np.ndarray:
        return self.T[self.m:, self.m:]

    @property
    def lambda1(self) -> np.ndarray:
        return np.linalg.eigvals(self.T11) if self.m else np.zeros(0, complex)

    @property
    def lambda2(self) -> np.ndarray:
        return np.linalg.eigvals(self.T22) if self.m < self.n else np.zeros(0, complex)

    @property
    def spectral_gap(self) -> float:
        l1, l2 = self.lambda1, self.lambda2
        if l1.size == 0 or l2.size == 0:
            return float("inf")
        return float(np.abs(l1[:, None] - l2[None, :]).min())

    def reconstruction_error(self) -> float:
        return float(np.linalg.norm(self.Q @ self.T @ self.Q.T - self.A))


def factorize(
    A: np.ndarray,
    select: Callable[[complex], bool],
    key: Callable[[complex], float] | None = None,
    tol: Tolerances = DEFAULT,
) -> BlockSchurFactorization:
    """Fresh ordered real Schur factorization with the selected eigenvalues leading."""
    A = np.asarray(A, dtype=float)
    S, m = order_schur(real_schur(A), select, key, tol=tol)
    T = S.T.copy()
    T[m:, :m] = 0.0
    return BlockSchurFactorization(Q=S.Q, T=T, m=m, A=A.copy())


# ---------------------------------------------------------------------------
# Riccati equation

@dataclass(frozen=True)
class RiccatiData:
    """Blocks of ``Q(0)^T A(s) Q(0) = T(0) + E(s)``."""

    T11: np.ndarray
    T12: np.ndarray
    T22: np.ndarray
    E21: np.ndarray
    E_norm: float
    dA_norm: float      # ||A(s) - A(0)||_F
    A_norm: float       # ||A(s)||_F

    @property
    def m(self) -> int:
        return self.T11.shape[0]


def form_riccati_data(F0: BlockSchurFactorization, A_s: np.ndarray) -> RiccatiData:
    A_s = np.asarray(A_s, dtype=float)
    if A_s.shape != F0.A.shape:
        raise ValueError(f"A(s) has shape {A_s.shape}, factorization is {F0.A.shape}")
    m = F0.m
    M = matmul(F0.Q.T, A_s, F0.Q)
    E = M - F0.T
    return RiccatiData(
        T11=M[:m, :m].copy(),
        T12=M[:m, m:].copy(),
        T22=M[m:, m:].copy(),
        E21=M[m:, :m].copy(),
        E_norm=float(np.linalg.norm(E)),
        dA_norm=float(np.linalg.norm(A_s - F0.A)),
        A_norm=float(np.linalg.norm(A_s)),
    )


def riccati_residual(Y: np.ndarray, data: RiccatiData) -> np.ndarray:
    return data.T22 @ Y - Y @ data.T11 + data.E21 - Y @ data.T12 @ Y


def _sep_or_zero(A: np.ndarray, B: np.ndarray) -> float:
    if A.size == 0 or B.size == 0:
        return float("inf")
    return sep(A, B)


def kappa(data: RiccatiData) -> float:
    """``||T12|| ||E21|| / sep(T11, T22)^2``; below 1/4 (1/12) the simple (Newton) iteration converges."""
    num = np.linalg.norm(data.T12) * np.linalg.norm(data.E21)
    if num == 0.0:
        return 0.0
    s = _sep_or_zero(data.T11, data.T22)
    return float(num / s**2) if s > 0 else float("inf")


def kappa_tilde(data: RiccatiData, Y0: np.ndarray) -> float:
    """Same quantity for the Riccati equation in the correction ``Y - Y0``."""
    num = np.linalg.norm(data.T12) * np.linalg.norm(riccati_residual(Y0, data))
    if num == 0.0:
        return 0.0
    s = _sep_or_zero(data.T11 + data.T12 @ Y0, data.T22 - Y0 @ data.T12)
    return float(num / s**2) if s > 0 else float("inf")


def safeguard_alpha(data: RiccatiData) -> float:
    t12 = np.linalg.norm(data.T12)
    if t12 == 0.0:
        return 0.0
    s = _sep_or_zero(data.T11, data.T22)
    return float(t12 / s**2) if s > 0 else float("inf")


def safeguard_check(data: RiccatiData) -> tuple[bool, float]:
    """``alpha ||A(s) - A(0)||_F <= 1/4``, which implies ``kappa < 1/4``."""
    alpha = safeguard_alpha(data)
    margin = alpha * data.dA_norm if alpha > 0 else 0.0
    return bool(margin <= 0.25), float(margin)


@dataclass(frozen=True)
class RiccatiSolution:
    Y: np.ndarray
    iterations: int
    history: list[float]
    method: str
    guess: str
    kappa: float
    kappa_tilde: float
    iterates: list[np.ndarray] = field(default_factory=list, repr=False)
    shifted: ShiftedBlocks | None = field(default=None, repr=False)


def _sqrt_pair(Y: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """``(I + Y^T Y)^{1/2}``, its inverse, ``(I + Y Y^T)^{1/2}``, its inverse."""
    def spd_sqrt(M: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        w, V = np.linalg.eigh(M)
        count("eigh", 9.0 * M.shape[0] ** 3)
        r = np.sqrt(w)
        return (V * r) @ V.T, (V / r) @ V.T
    p, m = Y.shape
    r1, r1i = spd_sqrt(np.eye(m) + Y.T @ Y)
    r2, r2i = spd_sqrt(np.eye(p) + Y @ Y.T)
    return r1, r1i, r2, r2i


def _iterate(
    data: RiccatiData,
    Y0: np.ndarray | None,
    tol: float | None,
    max_iter: int | None,
    method: Method,
    guess: str,
    settings: Tolerances,
) -> RiccatiSolution:
    m, p = data.m, data.T22.shape[0]
    Y = np.zeros((p, m)) if Y0 is None else np.array(Y0, dtype=float)
    if tol is None:
        tol = settings.riccati * max(data.A_norm, np.finfo(float).tiny)
    if max_iter is None:
        max_iter = settings.riccati_max_iter
    kap = kappa(data)
    kap_t = kappa_tilde(data, Y)
    history: list[float] = []
    iterates = [Y.copy()]
    fixed = SylvesterOperator(data.T22, data.T11, tol=settings) if method == "simple" else None
    last: tuple[SylvesterOperator, np.ndarray] | None = None
    for k in range(max_iter + 1):
        F = riccati_residual(Y, data)
        count("riccati_residual", 2.0 * p * m * (p + m) + 4.0 * p * m * m)
        r = float(np.linalg.norm(F))
        history.append(r)
        if not np.isfinite(r) or (k > 0 and r > 1e8 * max(history[0], tol)):
            raise RiccatiDivergenceError(f"{method} iteration diverged", kap, history)
        if r <= tol:
            shifted = None
            if last is not None:
                op, Yk = last
                shifted = ShiftedBlocks(op, *_sqrt_pair(Yk))
            return RiccatiSolution(Y=Y, iterations=k, history=history, method=method,
                                   guess=guess, kappa=kap, kappa_tilde=kap_t,
                                   iterates=iterates, shifted=shifted)
        if k == max_iter:
            break
        if method == "simple":
            op = fixed
        else:
            op = SylvesterOperator(data.T22 - Y @ data.T12, data.T11 + data.T12 @ Y,
                                   tol=settings)
            last = (op, Y.copy())
        Y = Y + op.solve(-F)
        iterates.append(Y.copy())
    raise RiccatiDivergenceError(f"{method} iteration did not reach {tol:.2e} in {max_iter} steps",
                                 kap, history)


def solve_riccati_simple(data: RiccatiData, Y0: np.ndarray | None = None,
                         tol: float | None = None, max_iter: int | None = None,
                         guess: str = "zero", settings: Tolerances = DEFAULT) -> RiccatiSolution:
    """Fixed-point iteration ``T22 D - D T11 = -F(Y_{k-1})``, ``Y_k = Y_{k-1} + D``."""
    return _iterate(data, Y0, tol, max_iter, "simple", guess, settings)


def solve_riccati_newton(data: RiccatiData, Y0: np.ndarray | None = None,
                         tol: float | None = None, max_iter: int | None = None,
                         guess: str = "zero", settings: Tolerances = DEFAULT) -> RiccatiSolution:
    """Newton iteration with the shifted blocks ``T22 - Y T12`` and ``T11 + T12 Y``."""
    return _iterate(data, Y0, tol, max_iter, "newton", guess, settings)


def euler_initial_guess(
    F0: BlockSchurFactorization,
    data: RiccatiData,
    mode: Literal["difference", "derivative"] = "difference",
    Adot: np.ndarray | None = None,
    s: float | None = None,
    settings: Tolerances = DEFAULT,
) -> np.ndarray:
    """Forward-Euler predictor ``Y0 = s H21(0)`` for the Riccati solution.

    ``derivative`` mode needs ``Adot = A'(0)`` and the step ``s``;
    ``difference`` mode uses ``(A(s) - A(0))/s`` instead, which reduces to
    ``T22(0) Y0 - Y0 T11(0) = -E21``.
    """
    m = F0.m
    if mode == "derivative":
        if Adot is None or s is None:
            raise ValueError("derivative mode needs Adot and s")
        G = matmul(F0.Q.T, np.asarray(Adot, dtype=float), F0.Q)
        rhs = -G[m:, :m]
        scale = s
    elif mode == "difference":
        rhs = -data.E21
        scale = 1.0
    else:
        raise ValueError(f"unknown predictor mode {mode!r}")
    if F0.shifted is not None:
        H = F0.shifted.solve(rhs)
    else:
        H = SylvesterOperator(F0.T22, F0.T11, tol=settings).solve(rhs)
    return scale * H


# ---------------------------------------------------------------------------
# distances and assembly

def subspace_distance(Y: np.ndarray) -> float:
    """Sine of the largest angle between ``span Q1(0)`` and ``span Q1(s)``."""
    y = float(np.linalg.norm(Y, 2)) if Y.size else 0.0
    return y / np.sqrt(1.0 + y * y)


def basis_distance(Qa: np.ndarray, Qb: np.ndarray, method: str = "projector") -> float:
    """Sine of the largest principal angle between two orthonormal bases.

    ``svd`` evaluates ``sqrt(1 - sigma_min(Qa^T Qb)^2)`` directly; ``projector``
    uses ``||Qb - Qa Qa^T Qb||_2``, which keeps accuracy for tiny angles.
    """
    if Qa.shape != Qb.shape:
        raise ValueError("bases must have equal shape")
    if method == "svd":
        smin = np.linalg.svd(Qa.T @ Qb, compute_uv=False).min()
        return float(np.sqrt(max(0.0, 1.0 - smin * smin)))
    R = Qb - Qa @ (Qa.T @ Qb)
    return float(np.linalg.norm(R, 2))


def u_from_y(Y: np.ndarray) -> np.ndarray:
    p, m = Y.shape
    _, r1i, _, r2i = _sqrt_pair(Y)
    U1 = np.vstack([np.eye(m), Y]) @ r1i
    U2 = np.vstack([-Y.T, np.eye(p)]) @ r2i
    return np.hstack([U1, U2])


def assemble_step(F0: BlockSchurFactorization, A_s: np.ndarray, Y: np.ndarray,
                  settings: Tolerances = DEFAULT,
                  shifted: ShiftedBlocks | None = None) -> BlockSchurFactorization:
    """Build ``Q(s) = Q(0) U(s)`` from ``Y`` and re-block ``T(s) = Q(s)^T A(s) Q(s)``."""
    A_s = np.asarray(A_s, dtype=float)
    m = F0.m
    if not np.any(Y) and np.array_equal(A_s, F0.A):
        return F0
    U = u_from_y(Y)
    Q = matmul(F0.Q, U)
    T = matmul(Q.T, A_s, Q)
    t21 = float(np.linalg.norm(T[m:, :m]))
    threshold = settings.t21_zeroing * max(float(np.linalg.norm(A_s)), np.finfo(float).tiny)
    if t21 > threshold:
        raise RefinementInsufficientError(t21, threshold)
    T[m:, :m] = 0.0
    return BlockSchurFactorization(Q=Q, T=T, m=m, A=A_s.copy(), shifted=shifted)


@dataclass(frozen=True)
class CisStepReport:
    factorization: BlockSchurFactorization
    solution: RiccatiSolution
    distance: float
    alpha: float
    safeguard_margin: float
    safeguard_ok: bool
    sep: float
    accepted: bool
    warnings: tuple[str, ...] = ()

    @property
    def iterations(self) -> int:
        return self.solution.iterations

    @property
    def kappa(self) -> float:
        return self.solution.kappa

    @property
    def kappa_tilde(self) -> float:
        return self.solution.kappa_tilde

    def as_row(self) -> dict[str, object]:
        return {
            "method": self.solution.method,
            "guess": self.solution.guess,
            "iterations": self.iterations,
            "kappa": self.kappa,
            "kappa_tilde": self.kappa_tilde,
            "sep": self.sep,
            "distance": self.distance,
            "accepted": int(self.accepted),
        }


def cis_step(
    F0: BlockSchurFactorization,
    A_s: np.ndarray,
    method: Method = "newton",
    guess: Guess = "euler",
    Adot: np.ndarray | None = None,
    s: float | None = None,
    settings: Tolerances = DEFAULT,
    enforce_safeguard: bool = False,
    max_iter: int | None = None,
) -> CisStepReport:
    """One continuation step of the invariant subspace from ``F0.A`` to ``A_s``.

    Raises :class:`CisStepRejected` when refinement fails; the caller is
    expected to shorten its step.
    """
    A_s = np.asarray(A_s, dtype=float)
    data = form_riccati_data(F0, A_s)
    sep0 = _sep_or_zero(data.T11, data.T22)
    alpha = safeguard_alpha(data)
    ok, margin = safeguard_check(data)
    warnings: list[str] = []
    sep_floor = settings.sylvester_sep * (np.linalg.norm(data.T11) + np.linalg.norm(data.T22))
    if not sep0 > sep_floor:
        raise CisStepRejected("spectra of the leading and trailing blocks overlap",
                              kappa=float("inf"), sep=sep0, safeguard_ok=ok)
    if not ok:
        if enforce_safeguard:
            raise CisStepRejected(f"safeguard violated (alpha*||dA|| = {margin:.3e})",
                                  kappa=kappa(data), sep=sep0, safeguard_ok=False)
        warnings.append(f"safeguard margin {margin:.3e} > 1/4")

    try:
        if guess == "zero":
            Y0 = None
        elif guess == "euler":
            if Adot is not None:
                Y0 = euler_initial_guess(F0, data, "derivative", Adot=Adot, s=s,
                                         settings=settings)
            else:
                Y0 = euler_initial_guess(F0, data, "difference", settings=settings)
        else:
            raise ValueError(f"unknown guess {guess!r}")
        solver = solve_riccati_newton if method == "newton" else solve_riccati_simple
        sol = solver(data, Y0, max_iter=max_iter, guess=guess, settings=settings)
        F1 = assemble_step(F0, A_s, sol.Y, settings=settings, shifted=sol.shifted)
    except RiccatiDivergenceError as exc:
        raise CisStepRejected(str(exc), kappa=exc.kappa, sep=sep0, safeguard_ok=ok) from exc
    except (SylvesterSingularError, RefinementInsufficientError) as exc:
        raise CisStepRejected(str(exc), kappa=kappa(data), sep=sep0, safeguard_ok=ok) from exc

    if not F1.spectral_gap > 0:
        raise CisStepRejected("eigenvalue groups merged after the step",
                              kappa=sol.kappa, sep=sep0, safeguard_ok=ok)
    return CisStepReport(
        factorization=F1,
        solution=sol,
        distance=subspace_distance(sol.Y),
        alpha=alpha,
        safeguard_margin=margin,
        safeguard_ok=ok,
        sep=sep0,
        accepted=True,
        warnings=tuple(warnings),
    )


# ---------------------------------------------------------------------------
# the U differential equation and the Procrustes baseline

def _central_difference(A_path: Callable[[float], np.ndarray], s: float, h: float) -> np.ndarray:
    return (np.asarray(A_path(s + h)) - np.asarray(A_path(s - h))) / (2.0 * h)


def integrate_u_ode(
    F0: BlockSchurFactorization,
    A_path: Callable[[float], np.ndarray],
    s_end: float,
    H11: Callable[[float], np.ndarray] | None = None,
    H22: Callable[[float], np.ndarray] | None = None,
    Adot: Callable[[float], np.ndarray] | None = None,
    rtol: float = 1e-12,
    atol: float = 1e-13,
) -> np.ndarray:
    """Integrate ``U' = U H`` from ``U(0) = I`` to ``s_end``.

    ``H21`` is re-solved along the path from
    ``T22 H21 - H21 T11 = -(Q^T A' Q)_21``; the diagonal blocks of ``H`` are
    the supplied skew-symmetric functions (zero by default).
    """
    n, m = F0.n, F0.m
    h = 1e-5 * max(1.0, abs(s_end))

    def rhs(s: float, y: np.ndarray) -> np.ndarray:
        U = y.reshape(n, n)
        Q = F0.Q @ U
        T = Q.T @ np.asarray(A_path(s)) @ Q
        dA = Adot(s) if Adot is not None else _central_difference(A_path, s, h)
        G = Q.T @ np.asarray(dA) @ Q
        H21 = SylvesterOperator(T[m:, m:], T[:m, :m], check=False).solve(-G[m:, :m])
        H = np.zeros((n, n))
        H[m:, :m] = H21
        H[:m, m:] = -H21.T
        if H11 is not None:
            H[:m, :m] = H11(s)
        if H22 is not None:
            H[m:, m:] = H22(s)
        return (U @ H).ravel()

    sol = solve_ivp(rhs, (0.0, s_end), np.eye(n).ravel(), method="DOP853",
                    rtol=rtol, atol=atol)
    if not sol.success:
        raise RuntimeError(f"U integration failed: {sol.message}")
    return sol.y[:, -1].reshape(n, n)


def y_from_u(U: np.ndarray, m: int) -> np.ndarray:
    return np.linalg.solve(U[:m, :m].T, U[m:, :m].T).T


def _polar_factor(M: np.ndarray) -> np.ndarray:
    W, _, Zt = np.linalg.svd(M)
    k = M.shape[0]
    count("svd", 21.0 * k**3)
    return W @ Zt


def procrustes_baseline(
    F0: BlockSchurFactorization,
    A_s: np.ndarray,
    select: Callable[[complex], bool] | None = None,
    key: Callable[[complex], float] | None = None,
    settings: Tolerances = DEFAULT,
) -> BlockSchurFactorization:
    """Fresh ordered Schur factorization of ``A(s)`` aligned to ``Q(0)`` by Procrustes rotations."""
    A_s = np.asarray(A_s, dtype=float)
    if select is None:
        lam1 = F0.lambda1
        if np.all(lam1.real > 0):
            select = lambda z: z.real > 0
        elif np.all(lam1.real < 0):
            select = lambda z: z.real < 0
        else:
            raise ValueError("cannot infer the eigenvalue selector; pass select=")
    S, m = order_schur(real_schur(A_s), select, key, tol=settings)
    if m != F0.m:
        raise ValueError(f"A(s) has {m} selected eigenvalues, expected {F0.m}")
    P1, P2 = S.Q[:, :m], S.Q[:, m:]
    V1 = _polar_factor(matmul(P1.T, F0.Q1))
    V2 = _polar_factor(matmul(P2.T, F0.Q2)) if m < F0.n else np.zeros((0, 0))
    Q = np.hstack([matmul(P1, V1), matmul(P2, V2) if m < F0.n else P2])
    T = matmul(Q.T, A_s, Q)
    T[m:, :m] = 0.0
    return BlockSchurFactorization(Q=Q, T=T, m=m, A=A_s.copy())


# ---------------------------------------------------------------------------
# comparing the refinement methods along a matrix path

COMBINATIONS: tuple[tuple[Method, Guess], ...] = (
    ("simple", "zero"),
    ("newton", "zero"),
    ("simple", "euler"),
    ("newton", "euler"),
)


@dataclass
class MethodStats:
    method: str
    guess: str
    iterations: list[int] = field(default_factory=list)
    failures: int = 0
    rows: list[dict[str, object]] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.iterations)) if self.iterations else float("nan")

    @property
    def max(self) -> int:
        return int(np.max(self.iterations)) if self.iterations else 0

    def as_row(self) -> dict[str, object]:
        return {"method": self.method, "guess": self.guess, "steps": len(self.iterations),
                "mean_iterations": self.mean, "max_iterations": self.max,
                "failures": self.failures}


def compare_methods(
    paths: list[tuple[list[np.ndarray], BlockSchurFactorization]],
    combinations: tuple[tuple[Method, Guess], ...] = COMBINATIONS,
    settings: Tolerances = DEFAULT,
    max_iter: int | None = None,
) -> list[MethodStats]:
    """Follow each matrix sequence with every method/guess pair and tally iterations.

    ``paths`` holds ``(matrices, F0)`` where ``F0`` factorizes ``matrices[0]``.
    A rejected step counts as a failure; the path then continues from the
    reference Newton/Euler step so all pairs see the same sequence.
    """
    out = []
    for method, guess in combinations:
        stats = MethodStats(method, guess)
        for mats, F0 in paths:
            F = F0
            for A in mats[1:]:
                try:
                    rep = cis_step(F, A, method=method, guess=guess, settings=settings,
                                   max_iter=max_iter)
                    stats.iterations.append(rep.iterations)
                    stats.rows.append(rep.as_row())
                except CisStepRejected:
                    stats.failures += 1
                    rep = cis_step(F, A, settings=settings)
                F = rep.factorization
        out.append(stats)
    return out


def continue_subspace(
    F0: BlockSchurFactorization,
    A_path: Callable[[float], np.ndarray],
    s_end: float,
    ds: float,
    method: Method = "newton",
    guess: Guess = "euler",
    max_halvings: int = 8,
    settings: Tolerances = DEFAULT,
) -> list[tuple[float, CisStepReport]]:
    """Follow the invariant subspace of ``A_path(s)`` from 0 to ``s_end``.

    A rejected step is halved up to ``max_halvings`` times; after that the
    leading and trailing spectra are taken to be merging and
    :class:`BifurcationProximity` is raised.
    """
    out: list[tuple[float, CisStepReport]] = []
    F, s = F0, 0.0
    h_min = ds * 0.5**max_halvings
    while s < s_end:
        h = min(ds, s_end - s)
        rep = None
        while rep is None:
            try:
                rep = cis_step(F, A_path(s + h), method=method, guess=guess, settings=settings)
            except CisStepRejected:
                h *= 0.5
                if h < h_min:
                    raise BifurcationProximity(
                        f"step below {h_min:.3g} at s = {s:.6g}; spectra about to merge"
                    ) from None
        s += h
        F = rep.factorization
        out.append((s, rep))
    return out
