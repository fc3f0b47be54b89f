"""Successive continuation for heteroclinic and homoclinic connecting orbits.

The orbit is sought on a finite time interval of length ``T`` with
projection boundary conditions: ``u(0)`` lies in the unstable eigenspace of
the start equilibrium ``u0`` at distance ``eps0`` and ``u(1)`` ends near the
stable eigenspace of the target equilibrium ``u1`` at distance ``eps1``. The
right-end defects relative to the stable eigenspace are scaled into
intercepts ``tau_i``; an initial orbit with nonzero intercepts is produced by
continuation in ``T`` and the intercepts are then driven to zero one at a
time, first by rotating ``u(0)`` inside the unstable eigenspace and then by
freeing problem parameters. Orthonormal eigenspace bases along the way come
from :mod:`orbitcont.cis`.

All scalar unknowns live in one vector laid out by :class:`ScalarLayout`; a
stage decides which of them are free.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Literal, Sequence

import numpy as np
from scipy.integrate import solve_ivp

from .cis import BlockSchurFactorization, CisStepReport, cis_step, factorize
from .collocation import BoundaryValueProblem, ExtendedSystem, Mesh, discretize
from .continuation import (
    Branch,
    BranchPoint,
    ContinuationSettings,
    continue_branch,
    newton_correct,
)
from .errors import (
    CisStepRejected,
    ConfigError,
    CountingError,
    HyperbolicityError,
    NewtonFailure,
)
from .linalg import SylvesterOperator
from .models import ModelDefinition
from .settings import DEFAULT, Tolerances

__all__ = [
    "ConnectingOrbitProblem",
    "ScalarLayout",
    "OrbitState",
    "StageSpec",
    "EndpointBasis",
    "StageRecord",
    "ScheduleResult",
    "ScheduleSettings",
    "solve_equilibrium",
    "equilibrium_bases",
    "build_stage0",
    "build_stage",
    "default_schedule",
    "tau_values",
    "PhaseCondition",
    "phase_condition",
    "run_stage",
    "run_schedule",
    "shooting_defect",
]

log = logging.getLogger(__name__)

PhaseForm = Literal["conventional", "as_printed"]


# ---------------------------------------------------------------------------
# equilibria and eigenspace bases

def _unstable(lam: complex) -> bool:
    return lam.real > 0


def _stable(lam: complex) -> bool:
    return lam.real < 0


def solve_equilibrium(model: ModelDefinition, seed: np.ndarray, params: np.ndarray | None = None,
                      tol: float = 1e-12, max_iter: int = 50) -> np.ndarray:
    """Newton's method on ``f(u) = 0`` from ``seed``."""
    p = model.params if params is None else np.asarray(params, dtype=float)
    u = np.array(seed, dtype=float)
    for _ in range(max_iter):
        r = model.f(u, p)
        if np.linalg.norm(r, np.inf) <= tol:
            return u
        try:
            u = u - np.linalg.solve(model.f_u(u, p), r)
        except np.linalg.LinAlgError as exc:
            raise NewtonFailure("singular Jacobian at equilibrium seed", 0,
                                float(np.linalg.norm(r))) from exc
        if not np.all(np.isfinite(u)):
            break
    r = model.f(u, p) if np.all(np.isfinite(u)) else np.array([np.inf])
    if np.linalg.norm(r, np.inf) <= 1e3 * tol:
        return u
    raise NewtonFailure("equilibrium Newton did not converge", max_iter, float(np.linalg.norm(r)))


def check_hyperbolic(A: np.ndarray, tol: float = DEFAULT.hyperbolicity) -> np.ndarray:
    w = np.linalg.eigvals(A)
    if np.any(np.abs(w.real) <= tol):
        raise HyperbolicityError(
            f"eigenvalue with real part within {tol:g} of zero: {w[np.argmin(abs(w.real))]}")
    return w


def equilibrium_bases(
    A: np.ndarray,
    which: Literal["unstable", "stable"],
    prior: BlockSchurFactorization | None = None,
    *,
    method: str = "newton",
    guess: str = "euler",
    settings: Tolerances = DEFAULT,
) -> BlockSchurFactorization | CisStepReport:
    """Ordered block Schur factorization whose leading block is the (un)stable subspace.

    Without ``prior`` a fresh factorization is computed; at the unstable end
    the leading eigenvalues are ordered by increasing real part, so the first
    column follows the slowest unstable direction. With ``prior`` the basis is
    continued from it and the :class:`CisStepReport` is returned; a change in
    the subspace dimension raises :class:`CisStepRejected`.
    """
    select = _unstable if which == "unstable" else _stable
    if prior is None:
        return factorize(A, select, key=lambda lam: lam.real, tol=settings)
    rep = cis_step(prior, A, method=method, guess=guess, settings=settings)
    w = np.linalg.eigvals(A)
    m_now = int(np.sum([select(complex(x)) for x in w]))
    if m_now != prior.m:
        raise CisStepRejected(f"{which} dimension changed from {prior.m} to {m_now}",
                              kappa=rep.kappa, sep=rep.sep, safeguard_ok=rep.safeguard_ok)
    return rep


class EndpointBasis:
    """Continued eigenspace basis at one end state, with a committed base and a trial."""

    def __init__(self, which: Literal["unstable", "stable"], A: np.ndarray, *,
                 method: str = "newton", guess: str = "euler",
                 settings: Tolerances = DEFAULT) -> None:
        self.which = which
        self.method = method
        self.guess = guess
        self.settings = settings
        self.base: BlockSchurFactorization = equilibrium_bases(A, which, settings=settings)
        self.current = self.base
        self.report: CisStepReport | None = None
        self.history: list[dict[str, object]] = []

    @classmethod
    def from_factorization(cls, which: Literal["unstable", "stable"],
                           F: BlockSchurFactorization, **kwargs) -> "EndpointBasis":
        """Resume from a stored factorization instead of a fresh one."""
        obj = cls(which, F.A, **kwargs)
        obj.base = obj.current = F
        return obj

    @property
    def m(self) -> int:
        return self.base.m

    def update(self, A: np.ndarray) -> BlockSchurFactorization:
        if np.array_equal(A, self.base.A):
            self.current, self.report = self.base, None
            return self.current
        rep = equilibrium_bases(A, self.which, self.base, method=self.method,
                                guess=self.guess, settings=self.settings)
        self.current, self.report = rep.factorization, rep
        return self.current

    def commit(self, label: object = None) -> None:
        if self.report is not None:
            row = {"end": self.which, "label": label}
            row.update(self.report.as_row())
            row["safeguard_ok"] = int(self.report.safeguard_ok)
            self.history.append(row)
        self.base = self.current
        self.report = None

    def derivative(self, dA: np.ndarray) -> np.ndarray:
        """First-order change of ``Q`` along a matrix direction (minimal rotation)."""
        F = self.current
        m = F.m
        E = F.Q.T @ dA @ F.Q
        op = SylvesterOperator(F.T22, F.T11, check=False)
        H21 = op.solve(-E[m:, :m])
        dQ = np.empty_like(F.Q)
        dQ[:, :m] = F.Q2 @ H21
        dQ[:, m:] = -F.Q1 @ H21.T
        return dQ


# ---------------------------------------------------------------------------
# problem, layout and state

@dataclass
class ConnectingOrbitProblem:
    """Model plus end states and the eigenspace dimensions they induce."""

    model: ModelDefinition
    u0: np.ndarray
    u1: np.ndarray
    n0: int
    n1: int
    lambda_names: tuple[str, ...]
    eps0: float
    spectrum0: np.ndarray
    spectrum1: np.ndarray

    @classmethod
    def from_model(cls, model: ModelDefinition, *, u0_seed: Sequence[float] | None = None,
                   u1_seed: Sequence[float] | None = None, eps0: float | None = None,
                   lambda_names: Sequence[str] | None = None) -> "ConnectingOrbitProblem":
        s0 = model.u0_seed if u0_seed is None else u0_seed
        s1 = model.u1_seed if u1_seed is None else u1_seed
        if s0 is None or s1 is None:
            raise ConfigError(f"model {model.name!r} needs equilibrium seeds")
        u0 = solve_equilibrium(model, np.asarray(s0, float))
        u1 = solve_equilibrium(model, np.asarray(s1, float))
        w0 = check_hyperbolic(model.f_u(u0, model.params))
        w1 = check_hyperbolic(model.f_u(u1, model.params))
        n0 = int(np.sum(w0.real > 0))
        n1 = int(np.sum(w1.real < 0))
        n = model.n
        n_lambda = n - (n0 + n1) + 2
        if n_lambda < 0:
            raise ConfigError(f"n0 = {n0}, n1 = {n1} leave a negative parameter count")
        names = tuple(lambda_names) if lambda_names is not None else model.continuation_params
        if len(names) < n_lambda:
            raise ConfigError(f"{n_lambda} continuation parameters needed, "
                              f"model provides {len(names)}")
        names = names[:n_lambda]
        for nm in names:
            model.param_index(nm)
        if n0 == 0:
            raise ConfigError("start equilibrium has no unstable directions")
        lead = w0[w0.real > 0]
        lead = lead[np.argmin(lead.real)]
        if abs(lead.imag) > 0:
            raise ConfigError(f"leading unstable eigenvalue {lead:.6g} is complex; "
                              "start-up along a complex pair is not supported")
        scale = float(np.linalg.norm(u1 - u0)) or 1.0
        eps0 = 1e-4 * scale if eps0 is None else float(eps0)
        return cls(model=model, u0=u0, u1=u1, n0=n0, n1=n1, lambda_names=names,
                   eps0=eps0, spectrum0=w0, spectrum1=w1)

    @property
    def n(self) -> int:
        return self.model.n

    @property
    def n_lambda(self) -> int:
        return len(self.lambda_names)

    @property
    def n_tau(self) -> int:
        return self.n - self.n1

    @property
    def layout(self) -> "ScalarLayout":
        return ScalarLayout(self.n, self.n0, self.n1, self.model.param_names)


@dataclass(frozen=True)
class ScalarLayout:
    """Positions of every scalar unknown inside the full scalar vector."""

    n: int
    n0: int
    n1: int
    param_names: tuple[str, ...]

    @property
    def names(self) -> list[str]:
        out = ["T", "eps0", "eps1"]
        out += [f"c{i + 1}" for i in range(self.n0)]
        out += [f"tau{i + 1}" for i in range(self.n - self.n1)]
        out += list(self.param_names)
        out += [f"u0_{i + 1}" for i in range(self.n)]
        out += [f"u1_{i + 1}" for i in range(self.n)]
        return out

    @property
    def size(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)

    @property
    def T(self) -> int:
        return 0

    @property
    def eps0(self) -> int:
        return 1

    @property
    def eps1(self) -> int:
        return 2

    @property
    def c(self) -> slice:
        return slice(3, 3 + self.n0)

    @property
    def tau(self) -> slice:
        s = 3 + self.n0
        return slice(s, s + self.n - self.n1)

    @property
    def params(self) -> slice:
        s = self.tau.stop
        return slice(s, s + len(self.param_names))

    @property
    def u0(self) -> slice:
        s = self.params.stop
        return slice(s, s + self.n)

    @property
    def u1(self) -> slice:
        s = self.u0.stop
        return slice(s, s + self.n)


@dataclass
class OrbitState:
    """Discrete orbit together with all scalar unknowns."""

    mesh: Mesh
    U: np.ndarray
    scalars: np.ndarray
    layout: ScalarLayout
    stage: str = "stage0"

    def get(self, name: str) -> float:
        return float(self.scalars[self.layout.index(name)])

    @property
    def T(self) -> float:
        return float(self.scalars[self.layout.T])

    @property
    def eps0(self) -> float:
        return float(self.scalars[self.layout.eps0])

    @property
    def eps1(self) -> float:
        return float(self.scalars[self.layout.eps1])

    @property
    def c(self) -> np.ndarray:
        return self.scalars[self.layout.c]

    @property
    def tau(self) -> np.ndarray:
        return self.scalars[self.layout.tau]

    @property
    def params(self) -> np.ndarray:
        return self.scalars[self.layout.params]

    @property
    def u0(self) -> np.ndarray:
        return self.scalars[self.layout.u0]

    @property
    def u1(self) -> np.ndarray:
        return self.scalars[self.layout.u1]

    def copy(self) -> "OrbitState":
        return replace(self, U=self.U.copy(), scalars=self.scalars.copy())

    def save(self, path) -> None:
        np.savez(path, points=self.mesh.points, degree=self.mesh.degree, U=self.U,
                 scalars=self.scalars, names=np.array(self.layout.names), stage=self.stage)

    @classmethod
    def load(cls, path, layout: ScalarLayout) -> "OrbitState":
        z = np.load(path, allow_pickle=False)
        if list(z["names"]) != layout.names:
            raise ConfigError("snapshot layout does not match the problem")
        return cls(Mesh(z["points"], int(z["degree"])), z["U"], z["scalars"], layout,
                   str(z["stage"]))


def tau_values(u1_end: np.ndarray, u1: np.ndarray, eps1: float, Q1: np.ndarray,
               n1: int) -> np.ndarray:
    """Scaled components of ``u(1) - u1`` along the complement of the stable subspace."""
    if not eps1 > 0:
        raise ValueError("eps1 must be positive")
    return (np.asarray(u1_end) - np.asarray(u1)) @ Q1[:, n1:] / eps1


# ---------------------------------------------------------------------------
# phase condition

class PhaseCondition:
    """Integral condition fixing the time shift relative to a reference orbit ``q``.

    ``"conventional"`` is ``int (u - q) . q' dt``, which vanishes at ``u = q``
    and measures a small shift to first order. ``"as_printed"`` is
    ``int (u' - q') . u'' dt``.
    """

    def __init__(self, mesh: Mesh, Q: np.ndarray, form: PhaseForm = "conventional") -> None:
        if Q is None:
            raise ValueError("phase condition needs a reference orbit")
        if form not in ("conventional", "as_printed"):
            raise ValueError(f"unknown phase form {form!r}")
        self.form = form
        self.q, self.dq, _ = mesh.at_gauss(np.asarray(Q, dtype=float))

    def evaluate(self, t, u, du, ddu, p):
        K, n = u.shape
        zero = np.zeros((K, n))
        gp = np.zeros((K, p.size))
        if self.form == "conventional":
            g = np.sum((u - self.q) * self.dq, axis=1)
            return g, self.dq, zero, zero, gp
        g = np.sum((du - self.dq) * ddu, axis=1)
        return g, zero, ddu, du - self.dq, gp


def phase_condition(mesh: Mesh, U: np.ndarray, Q: np.ndarray | None,
                    form: PhaseForm = "conventional") -> float:
    """Value of the phase integral for orbit ``U`` against reference ``Q`` on ``mesh``."""
    if Q is None:
        raise ValueError("phase condition needs a reference orbit")
    pc = PhaseCondition(mesh, Q, form)
    u, du, ddu = mesh.at_gauss(np.asarray(U, dtype=float))
    g = pc.evaluate(mesh.gauss_points, u, du, ddu, np.zeros(0))[0]
    return float(mesh.quadrature_weights @ g)


# ---------------------------------------------------------------------------
# stages

EQUATIONS = (
    "ode",                 # u' = T f(u, lambda)
    "left_projection",     # u(0) - u0 orthogonal to the unstable complement
    "left_radius",         # |u(0) - u0| = eps0
    "intercepts",          # (u(1) - u1) . q1_{n1+i} = eps1 tau_i
    "right_radius",        # |u(1) - u1| = eps1
    "start_equilibrium",   # f(u0) = 0
    "end_equilibrium",     # f(u1) = 0
    "homotopy",            # (u(0) - u0) . q0_i = eps0 c_i
    "phase",
)


@dataclass(frozen=True)
class StageSpec:
    """Equation set and free scalars of one continuation stage.

    ``target`` names a monitor whose zero ends the stage (``None`` for open
    continuation); ``direction`` is a scalar name and sign fixing the
    initial orientation.
    """

    name: str
    equations: tuple[str, ...]
    free: tuple[str, ...]
    n: int
    n_boundary: int
    n_integral: int
    target: str | None = None
    direction: tuple[str, int] | None = None
    pinned_tau: tuple[int, ...] = ()

    @property
    def n_c(self) -> int:
        return self.n_boundary + self.n_integral

    @property
    def n_v(self) -> int:
        return len(self.free)


def _row_counts(n: int, n0: int, n1: int, equations: Iterable[str]) -> tuple[int, int]:
    size = {"left_projection": n - n0, "left_radius": 1, "intercepts": n - n1,
            "right_radius": 1, "start_equilibrium": n, "end_equilibrium": n, "homotopy": n0}
    eqs = list(equations)
    nb = sum(size[e] for e in eqs if e in size)
    ni = 1 if "phase" in eqs else 0
    return nb, ni


def _make_stage(problem_dims: tuple[int, int, int], name: str, equations: Sequence[str],
                free: Sequence[str], **kw) -> StageSpec:
    n, n0, n1 = problem_dims
    nb, ni = _row_counts(n, n0, n1, equations)
    spec = StageSpec(name=name, equations=tuple(equations), free=tuple(free), n=n,
                     n_boundary=nb, n_integral=ni, **kw)
    if spec.n_c - spec.n_v != n - 1:
        raise CountingError(f"stage {name}: n_c - n_v = {spec.n_c} - {spec.n_v}, "
                            f"expected {n - 1}")
    return spec


def build_stage(problem: ConnectingOrbitProblem, stage: int | str, *,
                phase: bool = False) -> StageSpec:
    """Stage description by number (1 ... n - n1 + 1) or by name ``"accuracy"`` / ``"final"``.

    Stage 1 grows ``T`` with ``u(0)`` pinned along the chosen unstable
    direction. Stages ``2 .. n0`` rotate ``u(0)`` inside the unstable
    eigenspace to zero ``tau_{k-1}``; stages ``n0 + 1 .. n - n1 + 1`` free
    ``u0``, ``u1`` and the first ``k - n0`` continuation parameters for the
    same purpose. ``"accuracy"`` shrinks ``eps1`` with all intercepts at zero
    and ``"final"`` continues the orbit in all continuation parameters,
    optionally with ``T`` fixed, ``eps0``/``eps1`` free and a phase condition.
    """
    n, n0, n1 = problem.n, problem.n0, problem.n1
    dims = (n, n0, n1)
    taus = [f"tau{i + 1}" for i in range(n - n1)]
    cs = [f"c{i + 1}" for i in range(n0)]
    lam = list(problem.lambda_names)
    u_ends = [f"u0_{i + 1}" for i in range(n)] + [f"u1_{i + 1}" for i in range(n)]
    last = n - n1 + 1
    if stage == 1:
        return _make_stage(dims, "step1",
                           ("ode", "left_projection", "intercepts", "right_radius", "homotopy"),
                           ["T", "eps1"] + taus, direction=("T", +1))
    if isinstance(stage, int) and 2 <= stage <= n0:
        k = stage
        return _make_stage(dims, f"step{k}",
                           ("ode", "left_projection", "left_radius", "intercepts",
                            "right_radius", "homotopy"),
                           ["eps1"] + cs[:k] + taus[k - 2:],
                           target=taus[k - 2], pinned_tau=tuple(range(k - 2)))
    if isinstance(stage, int) and n0 + 1 <= stage <= last:
        k = stage
        n_free_lam = k - n0
        if n_free_lam > len(lam):
            raise ConfigError(f"stage {k} needs {n_free_lam} parameters")
        return _make_stage(dims, f"step{k}",
                           ("ode", "left_projection", "left_radius", "intercepts",
                            "right_radius", "start_equilibrium", "end_equilibrium"),
                           ["eps1"] + taus[k - 2:] + lam[:n_free_lam] + u_ends,
                           target=taus[k - 2], pinned_tau=tuple(range(k - 2)))
    full = ("ode", "left_projection", "left_radius", "intercepts", "right_radius",
            "start_equilibrium", "end_equilibrium")
    pinned = tuple(range(n - n1))
    if stage == "accuracy":
        return _make_stage(dims, "accuracy", full,
                           ["eps1", "T"] + lam[:len(lam) - 1] + u_ends,
                           target="eps1_gap", direction=("eps1", -1), pinned_tau=pinned)
    if stage == "final":
        if phase:
            return _make_stage(dims, "final", full + ("phase",),
                               ["eps0", "eps1"] + lam + u_ends, pinned_tau=pinned)
        return _make_stage(dims, "final", full, ["T"] + lam + u_ends, pinned_tau=pinned)
    raise ConfigError(f"no stage {stage!r} for n = {n}, n0 = {n0}, n1 = {n1}")


def default_schedule(problem: ConnectingOrbitProblem) -> list[int | str]:
    """Stage 1, the homotopies in ``u(0)``, the parameter homotopies, accuracy, final."""
    return list(range(1, problem.n - problem.n1 + 2)) + ["accuracy", "final"]


# ---------------------------------------------------------------------------
# initial orbit

def build_stage0(problem: ConnectingOrbitProblem, mesh: Mesh, *, sign: int = 1,
                 T_init: float | None = None, variant: Literal["constant", "exponential"]
                 = "constant", basis0: EndpointBasis | None = None) -> OrbitState:
    """Nearly constant orbit leaving ``u0`` along the slowest unstable direction.

    ``T_init`` defaults to the largest value with ``|f(u(0))| T <= 1e-2 eps0``.
    """
    if sign not in (1, -1):
        raise ConfigError("sign must be +1 or -1")
    model = problem.model
    lay = problem.layout
    p = model.params
    F0 = basis0.current if basis0 is not None else equilibrium_bases(
        model.f_u(problem.u0, p), "unstable")
    q01 = F0.Q[:, 0]
    eps0 = problem.eps0
    start = problem.u0 + eps0 * sign * q01
    if T_init is None:
        fn = float(np.linalg.norm(model.f(start, p)))
        T_init = 1e-2 * eps0 / fn if fn > 0 else 1.0
    t = mesh.nodes
    if variant == "constant":
        U = np.tile(start, (t.size, 1))
    elif variant == "exponential":
        mu = float(np.min(F0.lambda1.real))
        U = problem.u0 + eps0 * sign * q01[None, :] * np.exp(mu * T_init * t)[:, None]
    else:
        raise ConfigError(f"unknown stage-0 variant {variant!r}")
    scalars = np.zeros(lay.size)
    scalars[lay.T] = T_init
    scalars[lay.eps0] = eps0
    scalars[lay.eps1] = float(np.linalg.norm(U[-1] - problem.u1))
    c = np.zeros(problem.n0)
    c[0] = sign
    scalars[lay.c] = c
    scalars[lay.params] = p
    scalars[lay.u0] = problem.u0
    scalars[lay.u1] = problem.u1
    F1 = equilibrium_bases(model.f_u(problem.u1, p), "stable")
    scalars[lay.tau] = tau_values(U[-1], problem.u1, scalars[lay.eps1], F1.Q, problem.n1)
    return OrbitState(mesh, U, scalars, lay, "stage0")


# ---------------------------------------------------------------------------
# assembling a stage into a discretized system

class _StageContext:
    """Boundary rows of a stage, with eigenspace bases refreshed from the unknowns."""

    def __init__(self, problem: ConnectingOrbitProblem, spec: StageSpec,
                 basis0: EndpointBasis, basis1: EndpointBasis,
                 fd_step: float = 1e-6) -> None:
        self.problem = problem
        self.spec = spec
        self.basis0 = basis0
        self.basis1 = basis1
        self.lay = problem.layout
        self.fd_step = fd_step
        self.free_set = set(spec.free)
        lay = self.lay
        model = problem.model
        # scalars that move the end-state Jacobians
        self.lam_idx = [lay.params.start + model.param_index(nm) for nm in problem.lambda_names
                        if nm in self.free_set]
        self.u0_free = any(nm.startswith("u0_") for nm in spec.free)
        self.u1_free = any(nm.startswith("u1_") for nm in spec.free)
        self.dQ0: dict[int, np.ndarray] = {}
        self.dQ1: dict[int, np.ndarray] = {}

    def _matrix_derivs(self, u: np.ndarray, p: np.ndarray, which_u: slice, u_free: bool
                       ) -> dict[int, np.ndarray]:
        model = self.problem.model
        lay = self.lay
        out: dict[int, np.ndarray] = {}
        for j in self.lam_idx:
            k = j - lay.params.start
            h = self.fd_step * max(1.0, abs(p[k]))
            pp, pm = p.copy(), p.copy()
            pp[k] += h
            pm[k] -= h
            out[j] = (model.f_u(u, pp) - model.f_u(u, pm)) / (2 * h)
        if u_free:
            for i in range(u.size):
                h = self.fd_step * max(1.0, abs(u[i]))
                e = np.zeros(u.size)
                e[i] = h
                out[which_u.start + i] = (model.f_u(u + e, p) - model.f_u(u - e, p)) / (2 * h)
        return out

    def refresh(self, scalars: np.ndarray) -> None:
        lay = self.lay
        model = self.problem.model
        p = scalars[lay.params]
        u0, u1 = scalars[lay.u0], scalars[lay.u1]
        self.basis0.update(model.f_u(u0, p))
        self.basis1.update(model.f_u(u1, p))
        if self.lam_idx or self.u0_free or self.u1_free:
            d0 = self._matrix_derivs(u0, p, lay.u0, self.u0_free)
            d1 = self._matrix_derivs(u1, p, lay.u1, self.u1_free)
            self.dQ0 = {j: self.basis0.derivative(dA) for j, dA in d0.items()}
            self.dQ1 = {j: self.basis1.derivative(dA) for j, dA in d1.items()}
        else:
            self.dQ0, self.dQ1 = {}, {}

    def boundary(self, ua: np.ndarray, ub: np.ndarray, s: np.ndarray):
        lay, n, n0, n1 = self.lay, self.problem.n, self.problem.n0, self.problem.n1
        model = self.problem.model
        p = s[lay.params]
        u0, u1 = s[lay.u0], s[lay.u1]
        eps0, eps1 = s[lay.eps0], s[lay.eps1]
        Q0 = self.basis0.current.Q
        Q1 = self.basis1.current.Q
        d0 = ua - u0
        d1 = ub - u1
        rows, Ja, Jb, Jp = [], [], [], []

        def add(r, ja, jb, jp):
            rows.append(np.atleast_1d(r))
            Ja.append(np.atleast_2d(ja))
            Jb.append(np.atleast_2d(jb))
            Jp.append(np.atleast_2d(jp))

        def q_derivs(cols: np.ndarray, dQ: dict[int, np.ndarray], d: np.ndarray,
                     jp: np.ndarray, col_sel: slice) -> None:
            for j, D in dQ.items():
                jp[:, j] += d @ D[:, col_sel]

        ns = s.size
        eqs = self.spec.equations
        if "left_projection" in eqs:
            C = Q0[:, n0:]
            jp = np.zeros((n - n0, ns))
            jp[:, lay.u0] = -C.T
            q_derivs(C, self.dQ0, d0, jp, slice(n0, n))
            add(d0 @ C, C.T, np.zeros((n - n0, n)), jp)
        if "left_radius" in eqs:
            r = np.linalg.norm(d0)
            g = d0 / r
            jp = np.zeros((1, ns))
            jp[0, lay.u0] = -g
            jp[0, lay.eps0] = -1.0
            add(r - eps0, g, np.zeros(n), jp)
        if "intercepts" in eqs:
            C = Q1[:, n1:]
            tau = s[lay.tau]
            jp = np.zeros((n - n1, ns))
            jp[:, lay.u1] = -C.T
            jp[:, lay.eps1] = -tau
            jp[np.arange(n - n1), lay.tau.start + np.arange(n - n1)] = -eps1
            q_derivs(C, self.dQ1, d1, jp, slice(n1, n))
            add(d1 @ C - eps1 * tau, np.zeros((n - n1, n)), C.T, jp)
        if "right_radius" in eqs:
            r = np.linalg.norm(d1)
            g = d1 / r
            jp = np.zeros((1, ns))
            jp[0, lay.u1] = -g
            jp[0, lay.eps1] = -1.0
            add(r - eps1, np.zeros(n), g, jp)
        for name, u, sl in (("start_equilibrium", u0, lay.u0), ("end_equilibrium", u1, lay.u1)):
            if name in eqs:
                jp = np.zeros((n, ns))
                jp[:, sl] = model.f_u(u, p)
                jp[:, lay.params] = model.f_p(u, p)
                add(model.f(u, p), np.zeros((n, n)), np.zeros((n, n)), jp)
        if "homotopy" in eqs:
            C = Q0[:, :n0]
            c = s[lay.c]
            jp = np.zeros((n0, ns))
            jp[:, lay.u0] = -C.T
            jp[:, lay.eps0] = -c
            jp[np.arange(n0), lay.c.start + np.arange(n0)] = -eps0
            q_derivs(C, self.dQ0, d0, jp, slice(0, n0))
            add(d0 @ C - eps0 * c, C.T, np.zeros((n0, n)), jp)
        return (np.concatenate(rows), np.vstack(Ja), np.vstack(Jb), np.vstack(Jp))


def _orbit_problem(problem: ConnectingOrbitProblem, spec: StageSpec, ctx: _StageContext,
                   scalars: np.ndarray, phase: PhaseCondition | None) -> BoundaryValueProblem:
    model = problem.model
    lay = problem.layout
    ps = lay.params

    def rhs(u, s):
        return s[lay.T] * model.f(u, s[ps])

    def rhs_u(u, s):
        return s[lay.T] * model.f_u(u, s[ps])

    def rhs_p(u, s):
        out = np.zeros(u.shape + (s.size,))
        out[..., lay.T] = model.f(u, s[ps])
        out[..., ps] = s[lay.T] * model.f_p(u, s[ps])
        return out

    free = [lay.index(nm) for nm in spec.free]
    integrals = [phase] if "phase" in spec.equations else []
    if "phase" in spec.equations and phase is None:
        raise ValueError("phase condition needs a reference orbit")
    return BoundaryValueProblem(n=problem.n, rhs=rhs, rhs_u=rhs_u, rhs_p=rhs_p,
                                boundary=ctx.boundary, n_boundary=spec.n_boundary,
                                p=scalars, free=free, integrals=integrals, names=lay.names)


# ---------------------------------------------------------------------------
# running stages

@dataclass
class ScheduleSettings:
    """Knobs of the stage driver; each stage may override continuation settings."""

    continuation: ContinuationSettings = field(default_factory=ContinuationSettings)
    stage_continuation: dict[str, ContinuationSettings] = field(default_factory=dict)
    eps1_small: float | None = None            # default 1e-5 |u1 - u0|
    step1_increase_limit: int = 3
    step1_T_max: float = 1e4
    final_direction: tuple[str, int] | None = None
    final_stop: Callable[[list[OrbitState]], str | None] | None = None
    final_fold_stop: str | None = None         # stop when this scalar turns back
    final_locate: tuple[str, float] | None = None
    phase: bool = False
    phase_form: PhaseForm = "conventional"
    cis_method: str = "newton"
    cis_guess: str = "euler"
    tolerances: Tolerances = DEFAULT
    try_both_signs: bool = True

    def for_stage(self, name: str) -> ContinuationSettings:
        return self.stage_continuation.get(name, self.continuation)


@dataclass
class StageRecord:
    name: str
    spec: StageSpec
    branch: Branch
    start: OrbitState
    end: OrbitState
    located: bool
    note: str = ""

    def transcript(self) -> dict[str, object]:
        return {
            "stage": self.name,
            "points": len(self.branch.points),
            "reason": self.branch.reason,
            "located": self.located,
            "target": self.spec.target,
            "n_c": self.spec.n_c,
            "n_v": self.spec.n_v,
            "end": {nm: float(v) for nm, v in zip(self.end.layout.names, self.end.scalars)},
            "note": self.note,
        }


@dataclass
class ScheduleResult:
    problem: ConnectingOrbitProblem
    stages: list[StageRecord]
    final: OrbitState
    cis_history: list[dict[str, object]]
    completed: bool
    message: str = ""

    def transcript(self) -> list[dict[str, object]]:
        return [s.transcript() for s in self.stages]

    def points(self) -> Iterable[tuple[str, int, BranchPoint]]:
        """Every accepted point as ``(stage name, index within stage, point)``."""
        for rec in self.stages:
            for i, pt in enumerate(rec.branch.points):
                yield rec.name, i, pt


class StageRunner:
    """Builds the discretized system for a stage and wraps state conversions."""

    def __init__(self, problem: ConnectingOrbitProblem, spec: StageSpec, state: OrbitState,
                 basis0: EndpointBasis, basis1: EndpointBasis,
                 phase: PhaseCondition | None = None) -> None:
        self.problem = problem
        self.spec = spec
        self.mesh = state.mesh
        self.ctx = _StageContext(problem, spec, basis0, basis1)
        self.bvp = _orbit_problem(problem, spec, self.ctx, state.scalars.copy(), phase)
        self.system: ExtendedSystem = discretize(self.bvp, self.mesh)

    def to_x(self, state: OrbitState) -> np.ndarray:
        self.system.p = state.scalars.copy()
        return self.system.pack(state.U, state.scalars)

    def to_state(self, X: np.ndarray) -> OrbitState:
        U, s = self.system.unpack(X)
        return OrbitState(self.mesh, U.copy(), s.copy(), self.problem.layout, self.spec.name)

    def refresh(self, X: np.ndarray) -> None:
        _, s = self.system.unpack(X)
        self.ctx.refresh(s)

    def free_position(self, name: str) -> int:
        return self.system.n_u + list(self.spec.free).index(name)

    def monitors(self, extra: dict[str, Callable[[np.ndarray], float]] | None = None
                 ) -> dict[str, Callable[[np.ndarray], float]]:
        lay = self.problem.layout
        out: dict[str, Callable[[np.ndarray], float]] = {}
        for nm in ["T", "eps0", "eps1"] + [f"tau{i + 1}" for i in range(self.problem.n_tau)] \
                + list(self.problem.lambda_names):
            j = lay.index(nm)
            out[nm] = (lambda X, j=j: float(self.system.unpack(X)[1][j]))
        if extra:
            out.update(extra)
        return out


def _commit_factory(runner: StageRunner, basis0: EndpointBasis, basis1: EndpointBasis,
                    counter: list[int]):
    def commit(pt: BranchPoint) -> None:
        label = f"{runner.spec.name}:{counter[0]}"
        counter[0] += 1
        basis0.commit(label)
        basis1.commit(label)
        pt.data["state"] = runner.to_state(pt.X)
        pt.data["bases"] = (basis0.base, basis1.base)
    return commit


def _correct_start(runner: StageRunner, state: OrbitState, settings: ContinuationSettings,
                   fix: str | None = None) -> BranchPoint:
    X0 = runner.to_x(state)
    if fix is not None:
        row = np.zeros(X0.size)
        row[runner.free_position(fix)] = 1.0
        X, its, rn = newton_correct(runner.system, X0, row=row, row_value=X0 @ row,
                                    settings=settings, refresh=runner.refresh)
    else:
        X, its, rn = newton_correct(runner.system, X0, settings=settings, refresh=runner.refresh)
    return BranchPoint(X=X, residual=rn, iterations=its, label="start")


def _step1_stop(settings: ScheduleSettings) -> Callable[[list[BranchPoint]], str | None]:
    """Stop once eps1 has grown over ``step1_increase_limit`` consecutive points."""
    limit = settings.step1_increase_limit
    T_max = settings.step1_T_max

    def stop(points: list[BranchPoint]) -> str | None:
        e = [p.monitors["eps1"] for p in points]
        if len(e) > limit and all(e[-i] > e[-i - 1] for i in range(1, limit + 1)):
            return "eps1-increasing"
        if points[-1].monitors["T"] > T_max:
            return "T-max"
        return None
    return stop


def _final_stop(settings: ScheduleSettings, lay: ScalarLayout
                ) -> Callable[[list[BranchPoint]], str | None] | None:
    user_stop = settings.final_stop
    fold = settings.final_fold_stop
    if user_stop is None and fold is None:
        return None
    jf = lay.index(fold) if fold is not None else None

    def stop(points: list[BranchPoint]) -> str | None:
        if jf is not None and len(points) >= 3:
            a, b, c = (p.data["state"].scalars[jf] for p in points[-3:])
            if (b - a) * (c - b) < 0:
                return f"fold-{fold}"
        if user_stop is not None:
            return user_stop([p.data["state"] for p in points])
        return None
    return stop


def run_stage(problem: ConnectingOrbitProblem, spec: StageSpec, state: OrbitState,
              basis0: EndpointBasis, basis1: EndpointBasis, settings: ScheduleSettings,
              *, direction: int | None = None, reference: np.ndarray | None = None,
              eps1_small: float | None = None) -> StageRecord:
    """Run one stage from ``state`` and return its record (``located`` tells success)."""
    phase = None
    if "phase" in spec.equations:
        phase = PhaseCondition(state.mesh, state.U if reference is None else reference,
                               settings.phase_form)
    runner = StageRunner(problem, spec, state, basis0, basis1, phase)
    cs = settings.for_stage(spec.name)
    counter = [0]
    commit = _commit_factory(runner, basis0, basis1, counter)
    lay = problem.layout

    fix = "T" if spec.name == "step1" else None
    start = _correct_start(runner, state, cs, fix=fix)

    extra: dict[str, Callable[[np.ndarray], float]] = {}
    stop = None
    locate = spec.target
    if spec.name == "accuracy":
        small = eps1_small
        extra["eps1_gap"] = lambda X: float(runner.system.unpack(X)[1][lay.eps1] - small)
    if spec.name == "step1":
        stop = _step1_stop(settings)
    if spec.name == "final":
        if settings.final_locate is not None:
            nm, value = settings.final_locate
            j = lay.index(nm)
            extra["final_target"] = lambda X: float(runner.system.unpack(X)[1][j] - value)
            locate = "final_target"
        stop = _final_stop(settings, lay)

    monitors = runner.monitors(extra)
    dir_vec = None
    dname, dsign = (spec.direction if spec.direction is not None else (None, 1))
    if spec.name == "final" and settings.final_direction is not None:
        dname, dsign = settings.final_direction
    if direction is not None:
        dsign = direction
    if dname is not None:
        dir_vec = np.zeros(start.X.size)
        dir_vec[runner.free_position(dname)] = float(dsign)
    elif direction is not None:
        dir_vec = None

    runner.refresh(start.X)
    branch = continue_branch(
        runner.system, start, cs,
        direction=dir_vec if dir_vec is not None else (
            (lambda t: float(direction)) if direction is not None else None),
        monitors=monitors, locate=locate, stop=stop, refresh=runner.refresh, commit=commit)

    note = ""
    if spec.name == "step1":
        e = branch.monitor("eps1")
        best = int(np.argmin(e))
        end_pt = branch.points[best]
        located = branch.reason == "eps1-increasing" and best > 0
        note = f"eps1 minimum {e[best]:.6e} at point {best}"
    else:
        end_pt = branch.last
        located = (branch.reason == "zero") if locate is not None else True
    end = end_pt.data["state"].copy()
    if located and spec.target is not None and spec.target.startswith("tau"):
        end.scalars[lay.index(spec.target)] = 0.0
    return StageRecord(spec.name, spec, branch, state, end, located, note)


def save_snapshot(path, state: OrbitState, F0: BlockSchurFactorization,
                  F1: BlockSchurFactorization, reference: np.ndarray | None = None) -> None:
    """Write the state with the eigenspace factorizations it was computed with."""
    extra = {} if reference is None else {"reference": reference}
    np.savez(path, points=state.mesh.points, degree=state.mesh.degree, U=state.U,
             scalars=state.scalars, names=np.array(state.layout.names), stage=state.stage,
             Q0=F0.Q, T0=F0.T, m0=F0.m, A0=F0.A, Q1=F1.Q, T1=F1.T, m1=F1.m, A1=F1.A, **extra)


def load_snapshot(path, layout: ScalarLayout) -> tuple[
        OrbitState, BlockSchurFactorization, BlockSchurFactorization, np.ndarray | None]:
    state = OrbitState.load(path, layout)
    z = np.load(path, allow_pickle=False)
    F0 = BlockSchurFactorization(Q=z["Q0"], T=z["T0"], m=int(z["m0"]), A=z["A0"])
    F1 = BlockSchurFactorization(Q=z["Q1"], T=z["T1"], m=int(z["m1"]), A=z["A1"])
    ref = z["reference"] if "reference" in z.files else None
    return state, F0, F1, ref


def state_residual(problem: ConnectingOrbitProblem, state: OrbitState,
                   F0: BlockSchurFactorization, F1: BlockSchurFactorization, *,
                   stage: int | str | None = None, reference: np.ndarray | None = None,
                   phase_form: PhaseForm = "conventional") -> float:
    """Max-norm residual of the stage equations at ``state`` with the given bases."""
    name = state.stage if stage is None else stage
    if isinstance(name, str) and name.startswith("step"):
        name = int(name[4:])
    spec = build_stage(problem, name, phase=reference is not None)
    b0 = EndpointBasis.from_factorization("unstable", F0)
    b1 = EndpointBasis.from_factorization("stable", F1)
    phase = None if reference is None else PhaseCondition(state.mesh, reference, phase_form)
    runner = StageRunner(problem, spec, state, b0, b1, phase)
    X = runner.to_x(state)
    runner.refresh(X)
    return float(np.max(np.abs(runner.system.residual(X))))


def run_schedule(problem: ConnectingOrbitProblem, mesh: Mesh,
                 settings: ScheduleSettings | None = None, *,
                 schedule: Sequence[int | str] | None = None, sign: int = 1,
                 T_init: float | None = None, variant: str = "constant",
                 start: OrbitState | None = None,
                 on_stage: Callable[[StageRecord], None] | None = None) -> ScheduleResult:
    """Execute the stage sequence and chain each located end point into the next stage.

    Stage 1 is retried with the opposite sign of the start direction if it
    does not reach a minimum of ``eps1``; homotopy stages are retried in the
    opposite direction if their target intercept never changes sign. A stage
    that still fails ends the run with ``completed = False`` and all records
    so far.
    """
    st = settings or ScheduleSettings()
    schedule = default_schedule(problem) if schedule is None else list(schedule)
    small = st.eps1_small
    if small is None:
        small = 1e-5 * float(np.linalg.norm(problem.u1 - problem.u0))
    tol = st.tolerances
    model = problem.model

    def fresh_bases(state: OrbitState | None) -> tuple[EndpointBasis, EndpointBasis]:
        p = model.params if state is None else state.params
        u0 = problem.u0 if state is None else state.u0
        u1 = problem.u1 if state is None else state.u1
        b0 = EndpointBasis("unstable", model.f_u(u0, p), method=st.cis_method,
                           guess=st.cis_guess, settings=tol)
        b1 = EndpointBasis("stable", model.f_u(u1, p), method=st.cis_method,
                           guess=st.cis_guess, settings=tol)
        return b0, b1

    basis0, basis1 = fresh_bases(start)
    state = start if start is not None else build_stage0(
        problem, mesh, sign=sign, T_init=T_init, variant=variant, basis0=basis0)
    records: list[StageRecord] = []
    reference = None

    def history() -> list[dict[str, object]]:
        return basis0.history + basis1.history

    for stage in schedule:
        spec = build_stage(problem, stage, phase=st.phase and stage == "final")
        attempts: list[int | None]
        if spec.name == "step1" or spec.target is not None and spec.name != "accuracy":
            attempts = [None, -1] if spec.name != "step1" else [None]
        else:
            attempts = [None]
        rec = None
        err: Exception | None = None
        for direction in attempts:
            b0_save, b1_save = basis0.base, basis1.base
            try:
                rec = run_stage(problem, spec, state, basis0, basis1, st, direction=direction,
                                reference=reference, eps1_small=small)
            except (NewtonFailure, CisStepRejected, CountingError) as exc:
                err = exc
                rec = None
                basis0.base = basis0.current = b0_save
                basis1.base = basis1.current = b1_save
                log.info("stage %s failed: %s", spec.name, exc)
                continue
            if rec.located:
                break
            basis0.base = basis0.current = b0_save
            basis1.base = basis1.current = b1_save
        if rec is None:
            return ScheduleResult(problem, records, state, history(), False,
                                  f"stage {spec.name} failed: {err}")
        records.append(rec)
        if on_stage is not None:
            on_stage(rec)
        if not rec.located:
            if spec.name == "step1" and st.try_both_signs and sign == 1 and start is None:
                log.info("stage 1 did not reach an eps1 minimum; retrying with sign -1")
                return run_schedule(problem, mesh, st, schedule=schedule, sign=-1,
                                    T_init=T_init, variant=variant, on_stage=on_stage)
            return ScheduleResult(problem, records, rec.end, history(), False,
                                  f"stage {spec.name} ended without reaching its target "
                                  f"({rec.branch.reason})")
        state = rec.end
        reference = state.U.copy()
    return ScheduleResult(problem, records, state, history(), True)


# ---------------------------------------------------------------------------
# independent check by time integration

def shooting_defect(model: ModelDefinition, state: OrbitState, *, method: str = "Radau",
                    rtol: float = 1e-10, atol: float = 1e-12) -> tuple[float, np.ndarray]:
    """Integrate the vector field from ``u(0)`` over time ``T``; return ``|x(T) - u(1)|`` and ``x(T)``.

    Uses an adaptive implicit integrator that shares nothing with the
    collocation code.
    """
    p = state.params
    sol = solve_ivp(lambda t, x: model.f(x, p), (0.0, state.T), state.U[0], method=method,
                    rtol=rtol, atol=atol, jac=lambda t, x: model.f_u(x, p))
    if sol.status != 0 or not np.all(np.isfinite(sol.y[:, -1])):
        return float("inf"), sol.y[:, -1]
    end = sol.y[:, -1]
    return float(np.linalg.norm(end - state.U[-1])), end
