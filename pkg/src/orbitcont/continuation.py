"""Newton correction and pseudo-arclength continuation of discretized BVPs.

The corrector works on any object exposing ``residual(X)``, ``jacobian(X)``
(sparse, ``n_x - 1`` rows by ``n_x`` columns) and ``weights()``; in practice
that is :class:`orbitcont.collocation.ExtendedSystem`.

Two hooks connect the engine to the orbit code:

``refresh(X)``
    called before every residual evaluation so that boundary data depending
    on the current parameters (equilibria bases) can be updated. It may raise
    :class:`~orbitcont.errors.CisStepRejected`, which rejects the step.
``commit(point)``
    called once a point is accepted.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import BifurcationProximity, CisStepRejected, NewtonFailure

__all__ = [
    "ContinuationSettings",
    "BranchPoint",
    "Branch",
    "newton_correct",
    "tangent_vector",
    "continue_branch",
    "detect_monitor_zero",
]

log = logging.getLogger(__name__)

Refresh = Callable[[np.ndarray], None]
Monitor = Callable[[np.ndarray], float]


@dataclass
class ContinuationSettings:
    ds: float = 0.05
    ds_min: float = 1e-7
    ds_max: float = 1.0
    newton_tol: float = 1e-9
    newton_max_iter: int = 12
    damping_halvings: int = 6
    grow: float = 1.3
    fast_iterations: int = 3
    slow_iterations: int = 8
    max_points: int = 200
    max_cis_halvings: int = 8
    zero_tol: float = 1e-8
    zero_max_trials: int = 20


@dataclass
class BranchPoint:
    """Accepted solution on a branch."""

    X: np.ndarray
    arclength: float = 0.0
    tangent: np.ndarray | None = None
    monitors: dict[str, float] = field(default_factory=dict)
    residual: float = 0.0
    iterations: int = 0
    ds: float = 0.0
    label: str = ""
    # direction and step used to reach this point from its predecessor
    step_tangent: np.ndarray | None = None
    step_ds: float = 0.0
    data: dict = field(default_factory=dict)


@dataclass
class Branch:
    points: list[BranchPoint]
    reason: str
    message: str = ""

    @property
    def last(self) -> BranchPoint:
        return self.points[-1]

    def monitor(self, name: str) -> np.ndarray:
        return np.array([p.monitors.get(name, np.nan) for p in self.points])


# ---------------------------------------------------------------------------
# linear algebra helpers

def _solve(J: sp.spmatrix, rhs: np.ndarray) -> np.ndarray:
    try:
        lu = spla.splu(sp.csc_matrix(J))
    except RuntimeError as exc:
        raise NewtonFailure(f"singular Jacobian ({exc})", 0, float("nan")) from exc
    x = lu.solve(rhs)
    if not np.all(np.isfinite(x)):
        raise NewtonFailure("non-finite Newton update", 0, float("nan"))
    return x


def _bordered(J: sp.spmatrix, row: np.ndarray) -> sp.csc_matrix:
    return sp.vstack([J, sp.csr_matrix(row[None, :])]).tocsc()


def tangent_vector(system, X: np.ndarray, guess: np.ndarray | None = None) -> np.ndarray:
    """Unit (weighted) kernel vector of ``J(X)``, oriented along ``guess`` when given."""
    J = system.jacobian(X)
    w = system.weights()
    n_x = J.shape[1]
    candidates = []
    if guess is not None:
        candidates.append(np.asarray(guess, dtype=float))
    # a fixed generic vector is almost never orthogonal to the kernel
    candidates.append(np.random.default_rng(12345).standard_normal(n_x))
    for k in range(n_x - 1, max(n_x - 8, -1), -1):
        e = np.zeros(n_x)
        e[k] = 1.0
        candidates.append(e)
    last_exc: Exception | None = None
    for c in candidates:
        try:
            z = _solve(_bordered(J, c), np.r_[np.zeros(J.shape[0]), 1.0])
        except NewtonFailure as exc:
            last_exc = exc
            continue
        nrm = np.sqrt(np.sum(w * z * z))
        if nrm == 0 or not np.isfinite(nrm):
            continue
        t = z / nrm
        if guess is not None and np.dot(w * t, guess) < 0:
            t = -t
        return t
    raise NewtonFailure(f"could not compute a tangent ({last_exc})", 0, float("nan"))


# ---------------------------------------------------------------------------
# Newton corrector

def newton_correct(
    system,
    X0: np.ndarray,
    *,
    row: np.ndarray | None = None,
    row_value: float = 0.0,
    settings: ContinuationSettings | None = None,
    refresh: Refresh | None = None,
) -> tuple[np.ndarray, int, float]:
    """Correct ``X0`` onto ``R(X) = 0``.

    With ``row`` given the extra equation ``row . X = row_value`` closes the
    system (pseudo-arclength); otherwise Moore-Penrose steps are taken, i.e.
    the minimum-norm update orthogonal to the current kernel.

    Returns the corrected vector, the number of iterations and the final
    residual norm. Raises :class:`NewtonFailure` when not converged.
    """
    st = settings or ContinuationSettings()
    X = np.array(X0, dtype=float)

    def full_residual(Y: np.ndarray) -> np.ndarray:
        if refresh is not None:
            refresh(Y)
        R = system.residual(Y)
        if row is not None:
            R = np.r_[R, row @ Y - row_value]
        return R

    R = full_residual(X)
    rn = float(np.linalg.norm(R, np.inf))
    t = None
    for it in range(1, st.newton_max_iter + 1):
        J = system.jacobian(X)
        if row is not None:
            M = _bordered(J, row)
            rhs = -R
        else:
            t = tangent_vector(system, X, t)
            M = _bordered(J, t * system.weights())
            rhs = np.r_[-R, 0.0]
        try:
            dX = _solve(M, rhs)
        except NewtonFailure as exc:
            raise NewtonFailure(exc.args[0], it, rn) from exc
        lam = 1.0
        for _ in range(st.damping_halvings + 1):
            Xn = X + lam * dX
            Rn = full_residual(Xn)
            rnn = float(np.linalg.norm(Rn, np.inf))
            if np.isfinite(rnn) and rnn <= rn:
                break
            lam *= 0.5
        if not np.isfinite(rnn):
            raise NewtonFailure("residual became non-finite", it, rn)
        X, R, rn = Xn, Rn, rnn
        step = float(np.linalg.norm(lam * dX, np.inf))
        if rn <= st.newton_tol and step <= 1e-6 * (1.0 + float(np.linalg.norm(X, np.inf))):
            return X, it, rn
        if rn <= 1e-3 * st.newton_tol:
            return X, it, rn
    raise NewtonFailure(f"no convergence in {st.newton_max_iter} iterations "
                        f"(residual {rn:.3e})", st.newton_max_iter, rn)


# ---------------------------------------------------------------------------
# branch following

def _evaluate_monitors(monitors: Mapping[str, Monitor], X: np.ndarray) -> dict[str, float]:
    return {name: float(fn(X)) for name, fn in monitors.items()}


def continue_branch(
    system,
    start: BranchPoint,
    settings: ContinuationSettings | None = None,
    *,
    direction: np.ndarray | Callable[[np.ndarray], float] | None = None,
    monitors: Mapping[str, Monitor] | None = None,
    locate: str | None = None,
    stop: Callable[[list[BranchPoint]], str | None] | None = None,
    refresh: Refresh | None = None,
    commit: Callable[[BranchPoint], None] | None = None,
) -> Branch:
    """Pseudo-arclength continuation from a converged ``start`` point.

    Parameters
    ----------
    direction
        Either a vector the initial tangent should have positive weighted
        inner product with, or a callable on the tangent whose sign fixes the
        orientation (positive keeps it).
    monitors
        Named scalar functions recorded at every accepted point.
    locate
        Name of a monitor whose sign change terminates the branch; the zero
        is located by secant iteration and appended with label ``"zero"``.
    stop
        Called with the point list after each acceptance; a returned string
        ends the run with that reason.
    """
    st = settings or ContinuationSettings()
    monitors = dict(monitors or {})
    w = system.weights()

    X0 = np.array(start.X, dtype=float)
    guess = direction if isinstance(direction, np.ndarray) else None
    t0 = tangent_vector(system, X0, guess)
    if callable(direction) and direction(t0) < 0:
        t0 = -t0
    first = BranchPoint(X=X0, arclength=start.arclength, tangent=t0,
                        monitors=_evaluate_monitors(monitors, X0),
                        residual=start.residual, iterations=start.iterations,
                        label=start.label or "start", data=dict(start.data))
    points = [first]
    if commit is not None:
        commit(first)

    ds = st.ds
    cis_halvings = 0
    reason, message = "max-points", ""
    while len(points) < st.max_points:
        cur = points[-1]
        t = cur.tangent
        Xp = cur.X + ds * t
        row = w * t
        try:
            X, its, rn = newton_correct(system, Xp, row=row, row_value=row @ cur.X + ds,
                                        settings=st, refresh=refresh)
        except CisStepRejected as exc:
            cis_halvings += 1
            log.debug("CIS rejected step ds=%.3e: %s", ds, exc)
            if cis_halvings > st.max_cis_halvings:
                reason, message = "bifurcation-proximity", str(exc)
                break
            ds *= 0.5
            if ds < st.ds_min:
                reason, message = "bifurcation-proximity", str(exc)
                break
            continue
        except NewtonFailure as exc:
            log.debug("corrector failed at ds=%.3e: %s", ds, exc)
            ds *= 0.5
            if ds < st.ds_min:
                reason, message = "min-step", str(exc)
                break
            continue
        cis_halvings = 0
        secant = X - cur.X
        nrm = np.sqrt(np.sum(w * secant * secant))
        t_new = secant / nrm if nrm > 0 else t
        pt = BranchPoint(X=X, arclength=cur.arclength + ds, tangent=t_new,
                         monitors=_evaluate_monitors(monitors, X), residual=rn,
                         iterations=its, ds=ds, step_tangent=t, step_ds=ds)
        if locate is not None:
            g0, g1 = cur.monitors[locate], pt.monitors[locate]
            # a start point already on the zero does not count as a crossing
            if abs(g0) > st.zero_tol and np.sign(g0) != np.sign(g1):
                zero = detect_monitor_zero(system, cur, pt, monitors, locate, st,
                                           refresh=refresh)
                if commit is not None:
                    commit(zero)
                points.append(zero)
                reason = "zero"
                break
        if commit is not None:
            commit(pt)
        points.append(pt)
        if stop is not None:
            why = stop(points)
            if why:
                reason = why
                break
        if its <= st.fast_iterations:
            ds = min(ds * st.grow, st.ds_max)
        elif its >= st.slow_iterations:
            ds = max(ds * 0.5, st.ds_min)
    if reason == "bifurcation-proximity" and len(points) == 1:
        raise BifurcationProximity(message)
    return Branch(points=points, reason=reason, message=message)


def detect_monitor_zero(
    system,
    a: BranchPoint,
    b: BranchPoint,
    monitors: Mapping[str, Monitor],
    name: str,
    settings: ContinuationSettings | None = None,
    *,
    refresh: Refresh | None = None,
) -> BranchPoint:
    """Locate a sign change of ``monitors[name]`` between accepted points ``a`` and ``b``.

    Secant iteration on the arclength along the predictor direction that led
    from ``a`` to ``b``, with the bracket kept so the iterate cannot escape.
    """
    st = settings or ContinuationSettings()
    w = system.weights()
    t = b.step_tangent if b.step_tangent is not None else a.tangent
    row = w * t
    base = row @ a.X
    fn = monitors[name]

    s0, g0 = 0.0, a.monitors[name]
    s1, g1 = b.step_ds, b.monitors[name]
    lo, glo, hi = s0, g0, s1
    for trial in range(1, st.zero_max_trials + 1):
        s = s1 - g1 * (s1 - s0) / (g1 - g0) if g1 != g0 else 0.5 * (lo + hi)
        if not (min(lo, hi) < s < max(lo, hi)):
            s = 0.5 * (lo + hi)
        Xp = a.X + s * t
        X, its, rn = newton_correct(system, Xp, row=row, row_value=base + s,
                                    settings=st, refresh=refresh)
        g = float(fn(X))
        if abs(g) <= st.zero_tol:
            return BranchPoint(X=X, arclength=a.arclength + s, tangent=b.tangent,
                               monitors=_evaluate_monitors(monitors, X), residual=rn,
                               iterations=its, ds=s, label="zero", step_tangent=t,
                               step_ds=s, data={"trials": trial})
        if np.sign(g) == np.sign(glo):
            lo, glo = s, g
        else:
            hi = s
        s0, g0, s1, g1 = s1, g1, s, g
    raise NewtonFailure(f"monitor {name!r} zero not located in {st.zero_max_trials} trials",
                        st.zero_max_trials, abs(g1))
