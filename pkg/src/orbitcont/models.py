"""Built-in vector fields with analytic Jacobians.

Every field is vectorized over leading axes: ``f(u, p)`` accepts ``u`` of
shape ``(..., n)`` and a parameter vector ``p`` (ordered as
``ModelDefinition.param_names``) and returns ``(..., n)``; ``f_u`` returns
``(..., n, n)`` and ``f_p`` returns ``(..., n, len(p))``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ConfigError

__all__ = [
    "ModelDefinition",
    "check_jacobians",
    "fhn4",
    "nagumo2",
    "linear_test",
    "REGISTRY",
    "get_model",
]

Field = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class ModelDefinition:
    name: str
    n: int
    param_names: tuple[str, ...]
    params: np.ndarray
    f: Field
    f_u: Field
    f_p: Field
    continuation_params: tuple[str, ...]
    u0_seed: np.ndarray | None = None
    u1_seed: np.ndarray | None = None
    expected_n0: int | None = None
    expected_n1: int | None = None
    extras: Mapping[str, object] = field(default_factory=dict)

    @property
    def n_lambda(self) -> int:
        return len(self.continuation_params)

    def param_index(self, name: str) -> int:
        return self.param_names.index(name)

    def with_params(self, **values: float) -> "ModelDefinition":
        p = self.params.copy()
        for k, v in values.items():
            p[self.param_index(k)] = float(v)
        return _replace(self, params=p)


def _replace(model: ModelDefinition, **changes) -> ModelDefinition:
    from dataclasses import replace
    return replace(model, **changes)


def check_jacobians(model: ModelDefinition, n_points: int = 5, seed: int = 0,
                    rtol: float = 1e-6) -> float:
    """Compare ``f_u`` and ``f_p`` with central differences; raise if they disagree."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    p0 = model.params
    for _ in range(n_points):
        u = rng.uniform(-1.0, 1.0, model.n)
        J = model.f_u(u, p0)
        Jp = model.f_p(u, p0)
        for j in range(model.n):
            h = 1e-6 * max(1.0, abs(u[j]))
            e = np.zeros(model.n)
            e[j] = h
            col = (model.f(u + e, p0) - model.f(u - e, p0)) / (2 * h)
            worst = max(worst, _rel(col, J[:, j]))
        for j in range(len(p0)):
            h = 1e-5 * abs(p0[j]) if p0[j] != 0.0 else 1e-6
            e = np.zeros(len(p0))
            e[j] = h
            col = (model.f(u, p0 + e) - model.f(u, p0 - e)) / (2 * h)
            worst = max(worst, _rel(col, Jp[:, j]))
    if worst > rtol:
        raise ValueError(f"{model.name}: analytic Jacobian disagrees with differences ({worst:.2e})")
    return worst


def _rel(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(1.0, np.linalg.norm(b)))


# ---------------------------------------------------------------------------
# FitzHugh-Nagumo with two diffusive variables, in travelling-wave coordinates

def fhn4(c: float = 0.2571271, delta: float = 0.001, eps: float = 0.001,
         gamma: float = 13.23529, a: float = 0.3) -> ModelDefinition:
    """Travelling fronts of the FitzHugh-Nagumo system with diffusing ``w``.

    State ``(v1, v2, w1, w2) = (v, v', w, w')``::

        v1' = v2
        v2' = c v2 - v1 (1 - v1)(v1 - a) + w1
        w1' = w2
        w2' = (c w2 - eps (v1 - gamma w1)) / delta
    """
    if delta == 0:
        raise ValueError("delta must be nonzero")
    names = ("c", "delta", "eps", "gamma", "a")

    def f(u, p):
        c_, d_, e_, g_, a_ = p
        v1, v2, w1, w2 = np.moveaxis(u, -1, 0)
        out = np.empty(np.shape(u))
        out[..., 0] = v2
        out[..., 1] = c_ * v2 - v1 * (1 - v1) * (v1 - a_) + w1
        out[..., 2] = w2
        out[..., 3] = (c_ * w2 - e_ * (v1 - g_ * w1)) / d_
        return out

    def f_u(u, p):
        c_, d_, e_, g_, a_ = p
        v1 = np.asarray(u)[..., 0]
        J = np.zeros(np.shape(u) + (4,))
        J[..., 0, 1] = 1.0
        J[..., 1, 0] = 3 * v1**2 - 2 * (1 + a_) * v1 + a_
        J[..., 1, 1] = c_
        J[..., 1, 2] = 1.0
        J[..., 2, 3] = 1.0
        J[..., 3, 0] = -e_ / d_
        J[..., 3, 2] = e_ * g_ / d_
        J[..., 3, 3] = c_ / d_
        return J

    def f_p(u, p):
        c_, d_, e_, g_, a_ = p
        v1, v2, w1, w2 = np.moveaxis(u, -1, 0)
        Jp = np.zeros(np.shape(u) + (5,))
        Jp[..., 1, 0] = v2
        Jp[..., 3, 0] = w2 / d_
        Jp[..., 3, 1] = -(c_ * w2 - e_ * (v1 - g_ * w1)) / d_**2
        Jp[..., 3, 2] = -(v1 - g_ * w1) / d_
        Jp[..., 3, 3] = e_ * w1 / d_
        Jp[..., 1, 4] = v1 * (1 - v1)
        return Jp

    # end states: the origin and the upper zero of (1 - v)(v - a) = 1/gamma
    disc = (1 + a) ** 2 - 4 * (a + 1.0 / gamma)
    v_hi = 0.5 * ((1 + a) + np.sqrt(disc)) if disc > 0 else 1.0
    model = ModelDefinition(
        name="fhn4",
        n=4,
        param_names=names,
        params=np.array([c, delta, eps, gamma, a], dtype=float),
        f=f, f_u=f_u, f_p=f_p,
        continuation_params=("c", "delta"),
        u0_seed=np.zeros(4),
        u1_seed=np.array([v_hi, 0.0, v_hi / gamma, 0.0]),
        expected_n0=2,
        expected_n1=2,
    )
    check_jacobians(model)
    return model


# ---------------------------------------------------------------------------
# scalar Nagumo front (w = 0), with a closed-form heteroclinic

def nagumo2(c: float = 0.25, a: float = 0.3) -> ModelDefinition:
    """``v1' = v2``, ``v2' = c v2 - v1 (1 - v1)(v1 - a)``.

    For ``c* = sqrt(2) (1/2 - a)`` the front ``v(z) = 1 / (1 + exp(-z / sqrt 2))``
    connects ``(0, 0)`` to ``(1, 0)``.
    """
    if not 0 < a < 0.5:
        raise ValueError("nagumo2 needs 0 < a < 1/2")
    names = ("c", "a")

    def f(u, p):
        c_, a_ = p
        v1, v2 = np.moveaxis(u, -1, 0)
        out = np.empty(np.shape(u))
        out[..., 0] = v2
        out[..., 1] = c_ * v2 - v1 * (1 - v1) * (v1 - a_)
        return out

    def f_u(u, p):
        c_, a_ = p
        v1 = np.asarray(u)[..., 0]
        J = np.zeros(np.shape(u) + (2,))
        J[..., 0, 1] = 1.0
        J[..., 1, 0] = 3 * v1**2 - 2 * (1 + a_) * v1 + a_
        J[..., 1, 1] = c_
        return J

    def f_p(u, p):
        v1, v2 = np.moveaxis(u, -1, 0)
        Jp = np.zeros(np.shape(u) + (2,))
        Jp[..., 1, 0] = v2
        Jp[..., 1, 1] = v1 * (1 - v1)
        return Jp

    c_star = np.sqrt(2.0) * (0.5 - a)
    model = ModelDefinition(
        name="nagumo2",
        n=2,
        param_names=names,
        params=np.array([c, a], dtype=float),
        f=f, f_u=f_u, f_p=f_p,
        continuation_params=("c", "a"),
        u0_seed=np.zeros(2),
        u1_seed=np.array([1.0, 0.0]),
        expected_n0=1,
        expected_n1=1,
        extras={
            "c_star": float(c_star),
            "profile": lambda z: 1.0 / (1.0 + np.exp(-np.asarray(z) / np.sqrt(2.0))),
        },
    )
    check_jacobians(model)
    return model


# ---------------------------------------------------------------------------
# linear matrix paths for CIS tests

def linear_test(
    n: int = 6,
    m: int = 3,
    spectra: Sequence[float] | None = None,
    kind: str = "rotation",
    seed: int = 0,
) -> ModelDefinition:
    """Linear field ``f(u, s) = A(s) u`` with a known invariant subspace path.

    ``kind``:
      ``diagonal``   A(s) = diag(spectra) + s diag(1..n)/n; subspaces are coordinate planes.
      ``rotation``   A(s) = R(s) (D + N) R(s)^T with R(s) = expm(s K), K skew; the
                     leading m columns of R(s) span the continued subspace.
      ``coalescing`` the smallest selected and largest unselected eigenvalue meet at
                     zero when s = 1.
    The selected group is the first ``m`` entries of ``spectra``.
    """
    from scipy.linalg import expm

    rng = np.random.default_rng(seed)
    if spectra is None:
        spectra = np.concatenate([np.linspace(1.0, 2.0, m), -np.linspace(1.0, 2.0, n - m)])
    spectra = np.asarray(spectra, dtype=float)
    if spectra.shape != (n,):
        raise ValueError("need one eigenvalue per dimension")
    lead, trail = spectra[:m], spectra[m:]
    if lead.size and trail.size and np.abs(lead[:, None] - trail[None, :]).min() <= 0:
        raise ValueError("selected and remaining spectra overlap")

    N = np.triu(rng.normal(scale=0.5, size=(n, n)), 1)
    if kind == "diagonal":
        drift = np.arange(1, n + 1) / n

        def A(s):
            return np.diag(spectra + s * drift)

        def basis(s):
            return np.eye(n)[:, :m]

        dA = lambda s: np.diag(drift)
    elif kind == "rotation":
        K = rng.normal(size=(n, n))
        K = K - K.T
        core = np.diag(spectra) + N

        def A(s):
            R = expm(s * K)
            return R @ core @ R.T

        def basis(s):
            return expm(s * K)[:, :m]

        dA = lambda s: K @ A(s) - A(s) @ K
    elif kind == "coalescing":
        i_lead = int(np.argmin(np.abs(lead)))
        i_trail = m + int(np.argmin(np.abs(trail)))
        W, _ = np.linalg.qr(rng.normal(size=(n, n)))
        N[i_lead, i_trail] = 0.0

        def diag_at(s):
            d = spectra.copy()
            d[i_lead] = spectra[i_lead] * (1 - s)
            d[i_trail] = spectra[i_trail] * (1 - s)
            return d

        def A(s):
            return W @ (np.diag(diag_at(s)) + N) @ W.T

        def basis(s):
            return W[:, :m]

        dA = lambda s: W @ np.diag(diag_at(1.0) - diag_at(0.0)) @ W.T
    else:
        raise ValueError(f"unknown kind {kind!r}")

    def f(u, p):
        return np.einsum("ij,...j->...i", A(p[0]), u)

    def f_u(u, p):
        return np.broadcast_to(A(p[0]), np.shape(u) + (n,)).copy()

    def f_p(u, p):
        return np.einsum("ij,...j->...i", dA(p[0]), u)[..., None]

    return ModelDefinition(
        name=f"linear_{kind}",
        n=n,
        param_names=("s",),
        params=np.array([0.0]),
        f=f, f_u=f_u, f_p=f_p,
        continuation_params=("s",),
        u0_seed=np.zeros(n),
        u1_seed=np.zeros(n),
        extras={"A": A, "Adot": dA, "basis": basis, "m": m},
    )


REGISTRY: dict[str, Callable[..., ModelDefinition]] = {
    "fhn4": fhn4,
    "nagumo2": nagumo2,
    "linear_test": linear_test,
}


def get_model(name: str, **overrides) -> ModelDefinition:
    try:
        factory = REGISTRY[name]
    except KeyError:
        raise ConfigError(f"unknown model {name!r}; known: {sorted(REGISTRY)}") from None
    try:
        return factory(**overrides)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for {name}: {exc}") from exc
