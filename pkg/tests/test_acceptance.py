"""Acceptance suite: one test per criterion, each printing a single pass/fail line.

The FitzHugh-Nagumo runs are shared through module fixtures; together they
take about a minute.
"""

import time

import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from orbitcont.cis import (
    COMBINATIONS,
    basis_distance,
    cis_step,
    compare_methods,
    euler_initial_guess,
    form_riccati_data,
    integrate_u_ode,
    kappa,
    kappa_tilde,
    safeguard_check,
    solve_riccati_newton,
    solve_riccati_simple,
    subspace_distance,
    u_from_y,
    y_from_u,
)
from orbitcont.collocation import Mesh
from orbitcont.continuation import ContinuationSettings
from orbitcont.errors import CountingError, RiccatiDivergenceError
from orbitcont.models import fhn4, nagumo2
from orbitcont.orbits import (
    ConnectingOrbitProblem,
    EndpointBasis,
    ScheduleSettings,
    StageRunner,
    build_stage,
    build_stage0,
    default_schedule,
    equilibrium_bases,
    run_schedule,
    shooting_defect,
)

from helpers import eig_subspace, principal_sine, split_instance

FHN_PARAMS = dict(delta=0.001, eps=0.001, gamma=13.23529, a=0.3)
FHN_C = 0.2571271
FHN_SPECTRUM = (-0.4247, -0.06553, 0.6958, 257.2)
# (delta, c) and (mu01, mu02, mu11, mu12) at the labelled branch points
BRANCH_LABELS = [
    ((0.3198, 0.2376), (0.7406, 0.7406, -0.4357, -0.06502)),
    ((0.4462, 0.2265), (0.6204, 0.6204, -0.4409, -0.06565)),
    ((0.5085, 0.2202), (0.5098, 0.6538, -0.4436, -0.06612)),
    ((1.383, 0.0), (0.1099, 0.5454, -0.5454, -0.1099)),
]
# mean iterations per method/guess pair: (i) 7, (ii) 5, (iii) slightly over 4, (iv) under 3
REFERENCE_MEANS = {("simple", "zero"): 7.0, ("newton", "zero"): 5.0,
               ("simple", "euler"): 4.0, ("newton", "euler"): 3.0}


def digits_agree(actual: float, desired: float, significant: int) -> bool:
    try:
        np.testing.assert_approx_equal(actual, desired, significant=significant)
    except AssertionError:
        return False
    return True


def fhn_spectra(model, u0, u1, p):
    """Unstable eigenvalues at ``u0`` and stable ones at ``u1``, sorted by real part."""
    w0 = np.linalg.eigvals(model.f_u(u0, p))
    w1 = np.linalg.eigvals(model.f_u(u1, p))
    return np.sort(w0[w0.real > 0].real), np.sort(w1[w1.real < 0].real)


# ---------------------------------------------------------------------------
# shared runs

@pytest.fixture(scope="module")
def fhn_problem():
    # start the search away from the reference speed
    return ConnectingOrbitProblem.from_model(fhn4(c=0.2, **FHN_PARAMS))


@pytest.fixture(scope="module")
def fhn_located(fhn_problem):
    st = ScheduleSettings(continuation=ContinuationSettings(ds=0.05, ds_max=5.0, max_points=600))
    t0 = time.perf_counter()
    res = run_schedule(fhn_problem, Mesh.uniform(100, 4), st, schedule=[1, 2, 3, "accuracy"])
    res.elapsed = time.perf_counter() - t0
    return res


@pytest.fixture(scope="module")
def fhn_branch(fhn_problem, fhn_located):
    assert fhn_located.completed, fhn_located.message
    st = ScheduleSettings(
        continuation=ContinuationSettings(ds=0.01, ds_max=0.5, max_points=3000),
        final_direction=("delta", 1), final_fold_stop="delta")
    t0 = time.perf_counter()
    res = run_schedule(fhn_problem, fhn_located.final.mesh, st, schedule=["final"],
                       start=fhn_located.final)
    res.elapsed = time.perf_counter() - t0
    return res


# ---------------------------------------------------------------------------
# CIS criteria

def test_criterion_01_cis_matches_eigen_oracle(criterion):
    rng = np.random.default_rng(1)
    worst, misses, t0 = 0.0, 0, time.perf_counter()
    for _ in range(1000):
        n = int(rng.integers(2, 13))
        m = int(rng.integers(1, n))
        A0, F0, B = split_instance(rng, n, m)
        s = 1.0
        # halve s until the safeguard holds and the split is still m / n - m
        while True:
            data = form_riccati_data(F0, A0 + s * B)
            if safeguard_check(data)[0] and np.sum(np.linalg.eigvals(A0 + s * B).real > 0) == m:
                break
            s *= 0.5
        As = A0 + s * B
        rep = cis_step(F0, As)
        d = principal_sine(rep.factorization.Q1, eig_subspace(As))
        worst = max(worst, d)
        misses += d > 1e-9
    ok = criterion(1, misses == 0,
                   f"1000 instances, worst distance {worst:.2e} (<= 1e-9), "
                   f"{time.perf_counter() - t0:.1f}s")
    assert ok


def test_criterion_02_convergence_regimes(criterion):
    rng = np.random.default_rng(2)
    eps = np.finfo(float).eps
    # simple iteration whenever kappa < 1/4
    simple_fail, simple_ratio = 0, 0.0
    for _ in range(500):
        n = int(rng.integers(2, 9))
        m = int(rng.integers(1, n))
        A0, F0, B = split_instance(rng, n, m)
        target = rng.uniform(0.01, 0.25)
        s = 1.0
        while kappa(data := form_riccati_data(F0, A0 + s * B)) >= target:
            s *= 0.9
        try:
            h = solve_riccati_simple(data).history
        except RiccatiDivergenceError:
            simple_fail += 1
            continue
        if len(h) > 2:
            simple_ratio = max(simple_ratio, max(b / a for a, b in zip(h[:-1], h[1:])))
    # Newton tail slope on 500 instances with kappa < 1/12 whose last three
    # iterations are still above round-off
    slopes, newton_fail, drawn = [], 0, 0
    while len(slopes) < 500 and drawn < 5000:
        drawn += 1
        n = int(rng.integers(2, 9))
        m = int(rng.integers(1, n))
        A0, F0, B = split_instance(rng, n, m)
        target = rng.uniform(0.04, 1 / 12)
        s = 1.0
        while kappa(data := form_riccati_data(F0, A0 + s * B)) >= target:
            s *= 0.9
        floor = 10 * eps * data.A_norm
        try:
            h = np.array(solve_riccati_newton(data, tol=floor, max_iter=40).history)
        except RiccatiDivergenceError:
            newton_fail += 1
            continue
        h = h[h > floor]
        if h.size < 4:
            continue
        slopes.append(np.polyfit(np.log(h[-4:-1]), np.log(h[-3:]), 1)[0])
    min_slope = min(slopes)
    ok = (simple_fail == 0 and simple_ratio < 1.0 and newton_fail == 0 and len(slopes) == 500
          and min_slope >= 1.8)
    criterion(2, ok,
              f"simple: 500 runs, {simple_fail} failures, worst contraction {simple_ratio:.3f}; "
              f"newton: {len(slopes)} measured of {drawn}, {newton_fail} failures, "
              f"min tail slope {min_slope:.3f} (>= 1.8)")
    assert ok


def test_criterion_03_euler_predictor_order(criterion):
    rng = np.random.default_rng(3)
    A0, F0, B = split_instance(rng, 5, 2)
    C = 0.1 * rng.standard_normal((5, 5))
    ss = np.array([1e-2, 5e-3, 2.5e-3, 1.25e-3])
    ge, gd, gz, kr = [], [], [], []
    for s in ss:
        data = form_riccati_data(F0, A0 + s * B + s * s * C)
        Y = solve_riccati_newton(data).Y
        Ye = euler_initial_guess(F0, data, "difference")
        Yd = euler_initial_guess(F0, data, "derivative", Adot=B, s=s)
        ge.append(np.linalg.norm(Ye - Y))
        gd.append(np.linalg.norm(Yd - Y))
        gz.append(np.linalg.norm(Y))
        kr.append(kappa_tilde(data, Ye) / kappa(data))

    def slope(g):
        return np.polyfit(np.log(ss), np.log(g), 1)[0]

    band = np.array(kr) / ss
    ok = (slope(ge) >= 1.9 and slope(gd) >= 1.9 and abs(slope(gz) - 1.0) <= 0.1
          and abs(slope(kr) - 1.0) <= 0.1 and band.max() / band.min() <= 2.0)
    criterion(3, ok,
              f"Euler slope {slope(ge):.4f} (difference) / {slope(gd):.4f} (derivative), "
              f"zero-guess slope {slope(gz):.4f}, kappa~/kappa slope {slope(kr):.4f}, "
              f"(kappa~/kappa)/s in [{band.min():.3f}, {band.max():.3f}]")
    assert ok


def test_criterion_04_rotation_invariance(criterion):
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(50):
        A0, F0, B = split_instance(rng, 4, 2)
        C = 0.3 * rng.standard_normal((4, 4))

        def path(s, A0=A0, B=B, C=C):
            return A0 + 0.3 * s * B + 0.1 * np.sin(s) * C

        Y0 = y_from_u(integrate_u_ode(F0, path, 1.0), 2)
        for _ in range(10):
            S1 = rng.standard_normal((2, 2))
            S2 = rng.standard_normal((2, 2))
            S1, S2 = S1 - S1.T, S2 - S2.T
            U = integrate_u_ode(F0, path, 1.0, H11=lambda s, S1=S1: np.cos(s) * S1,
                                H22=lambda s, S2=S2: S2)
            worst = max(worst, float(np.linalg.norm(y_from_u(U, 2) - Y0)))
    ok = criterion(4, worst <= 1e-8, f"50 paths x 10 skew choices, worst |dY| {worst:.2e}")
    assert ok


def test_criterion_05_distance_identity(criterion):
    rng = np.random.default_rng(5)
    worst_svd = worst_proj = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 10))
        m = int(rng.integers(1, n))
        Y = rng.standard_normal((n - m, m))
        Qa = np.eye(n)[:, :m]
        Qb = u_from_y(Y)[:, :m]
        d = subspace_distance(Y)
        worst_svd = max(worst_svd, abs(d - basis_distance(Qa, Qb, "svd")))
        worst_proj = max(worst_proj, abs(d - basis_distance(Qa, Qb, "projector")))
    ok = criterion(5, max(worst_svd, worst_proj) <= 1e-12,
                   f"1000 Y, closed form vs SVD {worst_svd:.1e}, vs projector {worst_proj:.1e}")
    assert ok


# ---------------------------------------------------------------------------
# method comparison on the FitzHugh-Nagumo branch

def test_criterion_06_method_comparison(criterion, fhn_branch):
    model = fhn_branch.problem.model
    states = [pt.data["state"] for pt in fhn_branch.stages[-1].branch.points]
    A0 = [model.f_u(s.u0, s.params) for s in states]
    A1 = [model.f_u(s.u1, s.params) for s in states]
    paths = [(A0, equilibrium_bases(A0[0], "unstable")), (A1, equilibrium_bases(A1[0], "stable"))]
    stats = {(s.method, s.guess): s for s in compare_methods(paths)}
    mean = {k: v.mean for k, v in stats.items()}
    order = [("newton", "euler"), ("simple", "euler"), ("newton", "zero"), ("simple", "zero")]
    ordered = all(mean[a] < mean[b] for a, b in zip(order[:-1], order[1:]))
    near = all(abs(mean[k] - REFERENCE_MEANS[k]) <= 1.5 for k in COMBINATIONS)
    euler_clean = stats["simple", "euler"].failures == 0 and stats["newton", "euler"].failures == 0
    ok = (ordered and near and euler_clean and mean["newton", "euler"] < 3.5
          and mean["simple", "zero"] > 5.5)
    table = ", ".join(f"{m[0]}+{g[0]} {mean[m, g]:.2f}/{stats[m, g].failures}"
                      for m, g in order)
    criterion(6, ok,
              f"mean iterations/failures over {2 * (len(states) - 1)} steps: {table}; "
              f"ordering {'holds' if ordered else 'violated'}, "
              f"within 1.5 of 3/4/5/7: {near}")
    assert ok


# ---------------------------------------------------------------------------
# FitzHugh-Nagumo orbit and branch

def test_criterion_07_fhn_location(criterion, fhn_located):
    assert fhn_located.completed, fhn_located.message
    fin = fhn_located.final
    c = fin.get("c")
    rel = abs(c - FHN_C) / FHN_C
    model = fhn_located.problem.model
    mu0, mu1 = fhn_spectra(model, fin.u0, fin.u1, fin.params)
    ours = np.concatenate([mu1, mu0])
    agree = [digits_agree(a, d, 3) for a, d in zip(ours, FHN_SPECTRUM)]
    ok = rel <= 1e-3 and all(agree) and fin.mesh.intervals <= 200
    pairs = ", ".join(f"{a:.6g} vs {d:g}{'' if g else ' (differs)'}"
                      for a, d, g in zip(ours, FHN_SPECTRUM, agree))
    criterion(7, ok, f"c = {c:.10f} (rel err {rel:.1e}); eigenvalues to 3 digits: {pairs}; "
                     f"N = {fin.mesh.intervals}, {fhn_located.elapsed:.0f}s")
    assert ok


def _branch_arrays(result):
    states = [pt.data["state"] for pt in result.stages[-1].branch.points]
    D = np.array([s.get("delta") for s in states])
    C = np.array([s.get("c") for s in states])
    return states, D, C


def _passes_near(D, C, dref, cref, samples=50):
    w = np.linspace(0.0, 1.0, samples)
    d = (D[:-1, None] + w * (D[1:, None] - D[:-1, None])).ravel()
    c = (C[:-1, None] + w * (C[1:, None] - C[:-1, None])).ravel()
    cd = np.abs(d - dref) <= 0.02 * dref
    cc = np.abs(c) <= 5e-3 if cref == 0 else np.abs(c - cref) <= 0.02 * abs(cref)
    return bool(np.any(cd & cc))


def test_criterion_08_fhn_branch(criterion, fhn_branch):
    model = fhn_branch.problem.model
    states, D, C = _branch_arrays(fhn_branch)
    steps = len(states) - 1
    notes, ok = [], 100 <= steps <= 2000
    for (dref, cref), mus in BRANCH_LABELS:
        near = _passes_near(D, C, dref, cref)
        if cref != 0:
            i = int(np.nonzero((D[:-1] - dref) * (D[1:] - dref) <= 0)[0][0])
            w = (dref - D[i]) / (D[i + 1] - D[i])
            a, b = states[i], states[i + 1]
            u0, u1, p = ((1 - w) * x + w * y for x, y in ((a.u0, b.u0), (a.u1, b.u1),
                                                          (a.params, b.params)))
        else:
            k = int(np.argmin(np.abs(D - dref) / dref + np.abs(C)))
            u0, u1, p = states[k].u0, states[k].u1, states[k].params
        w0 = np.linalg.eigvals(model.f_u(u0, p))
        w1 = np.linalg.eigvals(model.f_u(u1, p))
        ours = np.concatenate([np.sort(w0[w0.real > 0].real), np.sort(w1[w1.real < 0].real)])
        eig_ok = all(digits_agree(x, y, 2) for x, y in zip(ours, mus))
        ok &= near and eig_ok
        notes.append(f"({dref}, {cref}) {'near' if near else 'MISSED'}, "
                     f"eigs {'ok' if eig_ok else 'differ'} "
                     f"[{' '.join(f'{x:.4g}' for x in ours)}]")
    criterion(8, ok, f"{steps} steps, {fhn_branch.elapsed:.0f}s; " + "; ".join(notes))
    assert ok


def test_criterion_09_nagumo_exact_wave(criterion):
    model = nagumo2(a=0.3)
    pb = ConnectingOrbitProblem.from_model(model)
    st = ScheduleSettings(continuation=ContinuationSettings(ds=0.05, ds_max=2.0, max_points=400))
    res = run_schedule(pb, Mesh.uniform(60, 4), st, schedule=[1, 2, "accuracy"])
    assert res.completed, res.message
    fin = res.final
    c_star = model.extras["c_star"]
    profile = model.extras["profile"]
    z = fin.T * fin.mesh.nodes
    v = fin.U[:, 0]

    def err(shift):
        return float(np.max(np.abs(v - profile(z + shift))))

    guess = -np.sqrt(2.0) * np.log(1.0 / v[0] - 1.0)
    best = minimize_scalar(err, bracket=(guess - 0.1, guess + 0.1), tol=1e-12)
    ok = abs(fin.get("c") - c_star) <= 1e-6 and best.fun <= 1e-5
    criterion(9, ok, f"c = {fin.get('c'):.10f} vs {c_star:.10f}, "
                     f"profile max error {best.fun:.1e} after shift {best.x:.4f}")
    assert ok


def test_criterion_10_counting_identity(criterion):
    checked = 0
    problems = [ConnectingOrbitProblem.from_model(fhn4(**FHN_PARAMS)),
                ConnectingOrbitProblem.from_model(fhn4(delta=0.5, c=0.22)),
                ConnectingOrbitProblem.from_model(nagumo2()),
                ConnectingOrbitProblem.from_model(nagumo2(a=0.2, c=0.4))]
    bad = []
    for pb in problems:
        mesh = Mesh.uniform(8, 3)
        state = build_stage0(pb, mesh)
        b0 = EndpointBasis("unstable", pb.model.f_u(pb.u0, pb.model.params))
        b1 = EndpointBasis("stable", pb.model.f_u(pb.u1, pb.model.params))
        for stage in default_schedule(pb):
            for phase in (False, True):
                spec = build_stage(pb, stage, phase=phase)
                # the assembled system must be one row short of square
                try:
                    runner = StageRunner(pb, spec, state, b0, b1, None if not phase else
                                         _phase(state))
                except CountingError as exc:
                    bad.append(f"{pb.model.name}/{spec.name}: {exc}")
                    continue
                S = runner.system
                if spec.n_c - spec.n_v != pb.n - 1 or S.n_r != S.n_x - 1:
                    bad.append(f"{pb.model.name}/{spec.name}")
                checked += 1
    ok = criterion(10, not bad, f"{checked} stage systems on {len(problems)} problems, "
                                f"n_c - n_v = n - 1 everywhere" if not bad else str(bad))
    assert ok


def _phase(state):
    from orbitcont.orbits import PhaseCondition

    return PhaseCondition(state.mesh, state.U)


def test_criterion_11_shooting_consistency(criterion, fhn_located):
    fin = fhn_located.final
    pb = fhn_located.problem
    tol = 1e-3 * float(np.linalg.norm(pb.u1 - pb.u0))
    d, _ = shooting_defect(pb.model, fin, method="Radau")
    ok = criterion(11, d <= tol,
                   f"Radau from u(0) over T = {fin.T:.2f}: |x(T) - u(1)| = {d:.3e} "
                   f"(tolerance {tol:.3e})")
    assert ok
