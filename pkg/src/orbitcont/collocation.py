"""Piecewise-polynomial orthogonal collocation for parameter-dependent BVPs.

On every mesh interval the solution is a polynomial of degree ``d``
represented by its values at ``d + 1`` equally spaced nodes (shared at
interval ends, which gives continuity). The differential equation is
collocated at the ``d`` Gauss-Legendre points of each interval, and integral
constraints use the matching Gauss quadrature.

Unknown vector layout: ``X = [U.ravel(), p[free]]`` with ``U`` of shape
``(N d + 1, n)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Protocol, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import CountingError

__all__ = [
    "Mesh",
    "IntegralCondition",
    "BoundaryValueProblem",
    "ExtendedSystem",
    "discretize",
]


@lru_cache(maxsize=None)
def _reference(d: int) -> dict[str, np.ndarray]:
    """Lagrange basis on nodes i/d evaluated at the Gauss points of [0, 1]."""
    nodes = np.linspace(0.0, 1.0, d + 1)
    g, w = np.polynomial.legendre.leggauss(d)
    gauss = 0.5 * (g + 1.0)
    weights = 0.5 * w
    V = np.vander(nodes, d + 1, increasing=True)
    coef = np.linalg.solve(V, np.eye(d + 1))          # column i: coefficients of l_i
    P = np.polynomial.polynomial
    L = np.stack([P.polyval(gauss, coef[:, i]) for i in range(d + 1)], axis=1)
    D1 = np.stack([P.polyval(gauss, P.polyder(coef[:, i])) for i in range(d + 1)], axis=1)
    D2 = np.stack([P.polyval(gauss, P.polyder(coef[:, i], 2)) for i in range(d + 1)], axis=1)
    return {"nodes": nodes, "gauss": gauss, "weights": weights, "L": L, "D1": D1, "D2": D2,
            "coef": coef}


@dataclass(frozen=True)
class Mesh:
    points: np.ndarray
    degree: int = 4

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=float)
        object.__setattr__(self, "points", pts)
        if pts.ndim != 1 or pts.size < 5:
            raise ValueError("mesh needs at least 4 intervals")
        if not np.all(np.diff(pts) > 0):
            raise ValueError("mesh points must be strictly increasing")
        if pts[0] != 0.0 or pts[-1] != 1.0:
            raise ValueError("mesh must span [0, 1]")
        if not 2 <= self.degree <= 7:
            raise ValueError("collocation degree must lie in 2..7")

    @classmethod
    def uniform(cls, intervals: int, degree: int = 4) -> "Mesh":
        return cls(np.linspace(0.0, 1.0, intervals + 1), degree)

    @property
    def intervals(self) -> int:
        return self.points.size - 1

    @property
    def h(self) -> np.ndarray:
        return np.diff(self.points)

    @property
    def n_nodes(self) -> int:
        return self.intervals * self.degree + 1

    @property
    def nodes(self) -> np.ndarray:
        ref = _reference(self.degree)["nodes"][:-1]
        t = (self.points[:-1, None] + self.h[:, None] * ref[None, :]).ravel()
        return np.append(t, 1.0)

    @property
    def gauss_points(self) -> np.ndarray:
        ref = _reference(self.degree)["gauss"]
        return (self.points[:-1, None] + self.h[:, None] * ref[None, :]).ravel()

    @property
    def quadrature_weights(self) -> np.ndarray:
        w = _reference(self.degree)["weights"]
        return (self.h[:, None] * w[None, :]).ravel()

    def interval_nodes(self, U: np.ndarray) -> np.ndarray:
        """``(N, d + 1, n)`` view of node values per interval."""
        d = self.degree
        idx = np.arange(self.intervals)[:, None] * d + np.arange(d + 1)[None, :]
        return U[idx]

    def at_gauss(self, U: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Values, first and second derivatives at the Gauss points, each ``(N d, n)``."""
        ref = _reference(self.degree)
        W = self.interval_nodes(U)
        h = self.h[:, None, None]
        u = np.einsum("ki,jia->jka", ref["L"], W)
        du = np.einsum("ki,jia->jka", ref["D1"], W) / h
        ddu = np.einsum("ki,jia->jka", ref["D2"], W) / h**2
        n = U.shape[1]
        return u.reshape(-1, n), du.reshape(-1, n), ddu.reshape(-1, n)

    def evaluate(self, U: np.ndarray, t: np.ndarray | float) -> np.ndarray:
        """Piecewise polynomial at arbitrary times in [0, 1]."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        j = np.clip(np.searchsorted(self.points, t, side="right") - 1, 0, self.intervals - 1)
        x = (t - self.points[j]) / self.h[j]
        coef = _reference(self.degree)["coef"]
        basis = np.stack([np.polynomial.polynomial.polyval(x, coef[:, i])
                          for i in range(self.degree + 1)], axis=1)
        W = self.interval_nodes(U)[j]
        return np.einsum("ti,tia->ta", basis, W)

    def equidistribute(self, U: np.ndarray, intervals: int | None = None
                       ) -> tuple["Mesh", np.ndarray]:
        """New mesh with equal shares of solution arclength, and ``U`` moved onto it.

        Not used by the continuation driver unless requested.
        """
        N = self.intervals if intervals is None else intervals
        W = self.interval_nodes(U)
        seg = np.linalg.norm(W[:, -1] - W[:, 0], axis=1)
        # blend with uniform spacing so flat stretches keep some points
        density = seg + max(seg.sum(), 1e-300) * self.h
        cum = np.concatenate([[0.0], np.cumsum(density)])
        pts = np.interp(np.linspace(0.0, cum[-1], N + 1), cum, self.points)
        pts[0], pts[-1] = 0.0, 1.0
        new = Mesh(pts, self.degree)
        return new, self.evaluate(U, new.nodes)


class IntegralCondition(Protocol):
    """Scalar constraint ``sum_k w_k g(u_k, u'_k, u''_k, p)`` over the Gauss points."""

    def evaluate(self, t: np.ndarray, u: np.ndarray, du: np.ndarray, ddu: np.ndarray,
                 p: np.ndarray) -> tuple[np.ndarray, ...]:
        """Return ``g, g_u, g_du, g_ddu, g_p`` with shapes ``(K,), (K,n), (K,n), (K,n), (K,np)``."""


BoundaryFn = Callable[[np.ndarray, np.ndarray, np.ndarray],
                      tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]


@dataclass
class BoundaryValueProblem:
    """``u' = rhs(u, p)`` on [0, 1] with boundary and integral constraints.

    ``rhs`` receives ``u`` of shape ``(K, n)`` and the full scalar vector
    ``p``; the Jacobian callables return ``(K, n, n)`` and ``(K, n, len(p))``.
    ``boundary(ua, ub, p)`` returns the residual and its Jacobians with
    respect to ``u(0)``, ``u(1)`` and ``p``.
    """

    n: int
    rhs: Callable[[np.ndarray, np.ndarray], np.ndarray]
    rhs_u: Callable[[np.ndarray, np.ndarray], np.ndarray]
    rhs_p: Callable[[np.ndarray, np.ndarray], np.ndarray]
    boundary: BoundaryFn
    n_boundary: int
    p: np.ndarray
    free: Sequence[int]
    integrals: Sequence[IntegralCondition] = field(default_factory=tuple)
    names: Sequence[str] | None = None


class ExtendedSystem:
    """Discretized residual ``R(X)`` and sparse Jacobian of a :class:`BoundaryValueProblem`."""

    def __init__(self, problem: BoundaryValueProblem, mesh: Mesh) -> None:
        self.problem = problem
        self.mesh = mesh
        self.n = problem.n
        self.free = np.asarray(problem.free, dtype=int)
        self.p = np.array(problem.p, dtype=float)
        self.n_c = problem.n_boundary + len(problem.integrals)
        self.n_v = self.free.size
        if self.n_c - self.n_v != self.n - 1:
            raise CountingError(
                f"n_c - n_v = {self.n_c} - {self.n_v} = {self.n_c - self.n_v}, "
                f"expected n - 1 = {self.n - 1}")
        self.n_u = mesh.n_nodes * self.n
        self.n_x = self.n_u + self.n_v
        self.n_coll = mesh.intervals * mesh.degree * self.n
        self.n_r = self.n_coll + self.n_c
        self._pattern = self._collocation_pattern()

    # -- packing ----------------------------------------------------------
    def pack(self, U: np.ndarray, p: np.ndarray | None = None) -> np.ndarray:
        p = self.p if p is None else np.asarray(p, dtype=float)
        return np.concatenate([np.asarray(U, dtype=float).ravel(), p[self.free]])

    def unpack(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        U = X[:self.n_u].reshape(self.mesh.n_nodes, self.n)
        p = self.p.copy()
        p[self.free] = X[self.n_u:]
        return U, p

    def weights(self) -> np.ndarray:
        """Diagonal of the inner product used for arclength: L2-like on the orbit."""
        w = np.ones(self.n_x)
        w[:self.n_u] = 1.0 / self.mesh.n_nodes
        return w

    # -- residual -----------------------------------------------------------
    def residual(self, X: np.ndarray) -> np.ndarray:
        U, p = self.unpack(X)
        u, du, ddu = self.mesh.at_gauss(U)
        coll = du - self.problem.rhs(u, p)
        rb, *_ = self.problem.boundary(U[0], U[-1], p)
        parts = [coll.ravel(), np.atleast_1d(rb)]
        if self.problem.integrals:
            w = self.mesh.quadrature_weights
            t = self.mesh.gauss_points
            parts.append(np.array([w @ ic.evaluate(t, u, du, ddu, p)[0]
                                   for ic in self.problem.integrals]))
        return np.concatenate(parts)

    # -- Jacobian -------------------------------------------------------------
    def _collocation_pattern(self) -> tuple[np.ndarray, np.ndarray]:
        N, d, n = self.mesh.intervals, self.mesh.degree, self.n
        j, k, a, i, b = np.meshgrid(np.arange(N), np.arange(d), np.arange(n),
                                    np.arange(d + 1), np.arange(n), indexing="ij")
        rows = ((j * d + k) * n + a).ravel()
        cols = ((j * d + i) * n + b).ravel()
        return rows, cols

    def jacobian(self, X: np.ndarray) -> sp.csc_matrix:
        U, p = self.unpack(X)
        mesh, n = self.mesh, self.n
        N, d = mesh.intervals, mesh.degree
        ref = _reference(d)
        u, du, ddu = mesh.at_gauss(U)
        G = self.problem.rhs_u(u, p).reshape(N, d, n, n)
        h = mesh.h
        eye = np.eye(n)
        # dR[j,k,a] / dU[j,i,b] = D1[k,i]/h_j delta_ab - L[k,i] G[j,k,a,b]
        vals = (ref["D1"][None, :, None, :, None] / h[:, None, None, None, None]
                * eye[None, None, :, None, :]
                - ref["L"][None, :, None, :, None] * G[:, :, :, None, :])
        rows_c, cols_c = self._pattern
        rows = [rows_c]
        cols = [cols_c]
        data = [vals.ravel()]
        # parameter columns of the collocation block
        if self.n_v:
            Gp = self.problem.rhs_p(u, p)[:, :, self.free]       # (K, n, n_v)
            r = np.repeat(np.arange(self.n_coll), self.n_v)
            c = np.tile(self.n_u + np.arange(self.n_v), self.n_coll)
            rows.append(r)
            cols.append(c)
            data.append(-Gp.reshape(-1))
        # boundary rows
        rb, Ja, Jb, Jp = self.problem.boundary(U[0], U[-1], p)
        nb = np.atleast_1d(rb).size
        r0 = self.n_coll
        Jb_dense = np.zeros((nb, self.n_x))
        Jb_dense[:, :n] += Ja
        Jb_dense[:, self.n_u - n:self.n_u] += Jb
        if self.n_v:
            Jb_dense[:, self.n_u:] = np.asarray(Jp)[:, self.free]
        rr, cc = np.nonzero(Jb_dense)
        rows.append(r0 + rr)
        cols.append(cc)
        data.append(Jb_dense[rr, cc])
        # integral rows
        if self.problem.integrals:
            t = mesh.gauss_points
            w = mesh.quadrature_weights.reshape(N, d)
            for q, ic in enumerate(self.problem.integrals):
                _, gu, gdu, gddu, gp = ic.evaluate(t, u, du, ddu, p)
                gu = gu.reshape(N, d, n)
                gdu = gdu.reshape(N, d, n)
                gddu = gddu.reshape(N, d, n)
                hh = h[:, None, None, None]
                contrib = (w[:, :, None, None] * (
                    ref["L"][None, :, :, None] * gu[:, :, None, :]
                    + ref["D1"][None, :, :, None] / hh * gdu[:, :, None, :]
                    + ref["D2"][None, :, :, None] / hh**2 * gddu[:, :, None, :]
                )).sum(axis=1)                                    # (N, d+1, n)
                row = np.zeros(self.n_x)
                idx = (np.arange(N)[:, None] * d + np.arange(d + 1)[None, :])
                np.add.at(row.reshape(-1)[:self.n_u].reshape(mesh.n_nodes, n), idx, contrib)
                if self.n_v:
                    row[self.n_u:] = (mesh.quadrature_weights @ gp)[self.free]
                nz = np.nonzero(row)[0]
                rows.append(np.full(nz.size, r0 + nb + q))
                cols.append(nz)
                data.append(row[nz])
        J = sp.coo_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(self.n_r, self.n_x))
        return J.tocsc()


def discretize(problem: BoundaryValueProblem, mesh: Mesh) -> ExtendedSystem:
    """Build the collocation system; raises :class:`CountingError` on a bad constraint count."""
    return ExtendedSystem(problem, mesh)
