import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from orbitcont.cis import (
    assemble_step,
    basis_distance,
    cis_step,
    compare_methods,
    continue_subspace,
    euler_initial_guess,
    factorize,
    form_riccati_data,
    integrate_u_ode,
    kappa,
    kappa_tilde,
    procrustes_baseline,
    riccati_residual,
    safeguard_alpha,
    safeguard_check,
    solve_riccati_newton,
    solve_riccati_simple,
    subspace_distance,
    u_from_y,
    y_from_u,
)
from orbitcont.errors import BifurcationProximity, CisStepRejected
from orbitcont.linalg import flop_counter, sep, solve_sylvester
from orbitcont.models import linear_test

from helpers import eig_subspace, positive, principal_sine, random_orthogonal, split_instance


def scalar_data(t12, e21, t11=-1.0, t22=2.0):
    F0 = factorize(np.array([[t11, 0.0], [0.0, t22]]), lambda z: z.real < 0)
    A = np.array([[t11, t12], [e21, t22]])
    return F0, form_riccati_data(F0, A)


def scalar_root(t11, t12, t22, e21):
    # -t12 y^2 + (t22 - t11) y + e21 = 0, root of smaller magnitude
    r = np.roots([-t12, t22 - t11, e21])
    return r[np.argmin(np.abs(r))].real


# ---------------------------------------------------------------------------
# Riccati data and residual

def test_data_for_unperturbed_matrix():
    rng = np.random.default_rng(0)
    A0, F0, _ = split_instance(rng, 5, 2)
    d = form_riccati_data(F0, A0)
    assert d.E_norm < 1e-12 * np.linalg.norm(A0)
    assert np.allclose(d.E21, 0.0, atol=1e-12)
    assert np.allclose(d.T11, F0.T11, atol=1e-12)
    assert np.allclose(d.T22, F0.T22, atol=1e-12)


def test_data_perturbation_norm():
    rng = np.random.default_rng(1)
    A0, F0, B = split_instance(rng, 6, 3)
    s = 1e-3
    d = form_riccati_data(F0, A0 + s * B)
    ref = s * np.linalg.norm(F0.Q.T @ B @ F0.Q)
    assert d.E_norm == pytest.approx(ref, rel=1e-9)


def test_data_block_rotation_invariance():
    rng = np.random.default_rng(2)
    A0, F0, B = split_instance(rng, 5, 2)
    W1, W2 = random_orthogonal(rng, 2), random_orthogonal(rng, 3)
    W = np.zeros((5, 5))
    W[:2, :2], W[2:, 2:] = W1, W2
    Q = F0.Q @ W
    F1 = type(F0)(Q=Q, T=Q.T @ A0 @ Q, m=2, A=A0)
    d0 = form_riccati_data(F0, A0 + 0.1 * B)
    d1 = form_riccati_data(F1, A0 + 0.1 * B)
    assert np.allclose(d1.E21, W2.T @ d0.E21 @ W1, atol=1e-13)
    assert np.linalg.norm(d1.E21) == pytest.approx(np.linalg.norm(d0.E21), rel=1e-12)


def test_residual_trivial_cases():
    rng = np.random.default_rng(3)
    A0, F0, B = split_instance(rng, 4, 2)
    d = form_riccati_data(F0, A0 + 0.01 * B)
    assert np.array_equal(riccati_residual(np.zeros((2, 2)), d), d.E21)
    d0 = form_riccati_data(F0, A0)
    assert np.linalg.norm(riccati_residual(np.zeros((2, 2)), d0)) < 1e-12


def test_scalar_quadratic_root():
    F0, d = scalar_data(t12=0.3, e21=0.2)
    y = scalar_root(-1.0, 0.3, 2.0, 0.2)
    assert abs(riccati_residual(np.array([[y]]), d)[0, 0]) < 1e-14
    assert kappa(d) < 0.25
    s = solve_riccati_simple(d)
    nw = solve_riccati_newton(d)
    assert s.Y[0, 0] == pytest.approx(y, abs=1e-12)
    assert nw.Y[0, 0] == pytest.approx(y, abs=1e-12)
    assert nw.iterations < s.iterations


def test_exact_guess_converges_immediately():
    F0, d = scalar_data(t12=0.3, e21=0.0)
    for solver in (solve_riccati_simple, solve_riccati_newton):
        sol = solver(d)
        assert sol.iterations == 0
        assert np.array_equal(sol.Y, np.zeros((1, 1)))


def test_simple_matches_eigen_oracle():
    rng = np.random.default_rng(4)
    A0, F0, B = split_instance(rng, 6, 3)
    As = A0 + 1e-3 * B
    sol = solve_riccati_simple(form_riccati_data(F0, As))
    F1 = assemble_step(F0, As, sol.Y)
    assert principal_sine(F1.Q1, eig_subspace(As)) <= 1e-10


def test_newton_no_worse_than_simple_head_to_head():
    rng = np.random.default_rng(5)
    wins = 0
    trials = 1000
    for _ in range(trials):
        n = int(rng.integers(2, 7))
        m = int(rng.integers(1, n))
        A0, F0, B = split_instance(rng, n, m)
        d = form_riccati_data(F0, A0 + rng.uniform(1e-3, 0.1) * B)
        if kappa(d) >= 0.25:
            wins += 1
            continue
        wins += solve_riccati_newton(d).iterations <= solve_riccati_simple(d).iterations
    assert wins >= 0.95 * trials


# ---------------------------------------------------------------------------
# Euler predictor, kappa and safeguard

def test_euler_guess_trivial_and_derivative_mode():
    rng = np.random.default_rng(6)
    A0, F0, B = split_instance(rng, 5, 2)
    d0 = form_riccati_data(F0, A0)
    assert np.allclose(euler_initial_guess(F0, d0, "difference"), 0.0, atol=1e-13)
    s = 1e-2
    d = form_riccati_data(F0, A0 + s * B)
    Y0 = euler_initial_guess(F0, d, "derivative", Adot=B, s=s)
    # H21 solves T22 H - H T11 = -(Q^T B Q)_21
    H = Y0 / s
    G = F0.Q.T @ B @ F0.Q
    assert np.allclose(F0.T22 @ H - H @ F0.T11, -G[2:, :2], atol=1e-12)
    # for a linear path the two modes coincide
    assert np.allclose(euler_initial_guess(F0, d, "difference"), Y0, atol=1e-13)


def test_euler_guess_is_one_euler_step_of_u_ode():
    rng = np.random.default_rng(7)
    A0, F0, B = split_instance(rng, 4, 2)
    s = 1e-3
    d = form_riccati_data(F0, A0 + s * B)
    Y0 = euler_initial_guess(F0, d, "derivative", Adot=B, s=s)
    G = F0.Q.T @ B @ F0.Q
    H21 = solve_sylvester(F0.T22, F0.T11, -G[2:, :2])
    U1 = np.eye(4)
    U1[2:, :2] += s * H21
    U1[:2, 2:] -= s * H21.T
    assert np.allclose(y_from_u(U1, 2), Y0, atol=1e-15)


def test_kappa_zero_cases():
    F0, d = scalar_data(t12=0.0, e21=0.4)
    assert kappa(d) == 0.0 and safeguard_alpha(d) == 0.0 and safeguard_check(d)[0]
    F0, d = scalar_data(t12=0.5, e21=0.0)
    assert kappa(d) == 0.0
    rng = np.random.default_rng(8)
    A0, F0, _ = split_instance(rng, 4, 2)
    assert safeguard_check(form_riccati_data(F0, A0))[0]


def test_kappa_tilde_ratio_halves_with_step():
    rng = np.random.default_rng(9)
    A0, F0, B = split_instance(rng, 5, 2)
    C = 0.1 * rng.standard_normal((5, 5))
    ratios = []
    for s in (1e-2, 5e-3):
        d = form_riccati_data(F0, A0 + s * B + s * s * C)
        Y0 = euler_initial_guess(F0, d, "difference")
        ratios.append(kappa_tilde(d, Y0) / kappa(d))
    assert 0.3 <= ratios[1] / ratios[0] <= 0.8


def test_safeguard_implies_simple_convergence_monte_carlo():
    rng = np.random.default_rng(10)
    for _ in range(1000):
        n = int(rng.integers(2, 8))
        A0, F0, B = split_instance(rng, n, int(rng.integers(1, n)))
        s = 1.0
        while not safeguard_check(form_riccati_data(F0, A0 + s * B))[0]:
            s *= 0.5
        d = form_riccati_data(F0, A0 + s * B)
        assert kappa(d) < 0.25
        solve_riccati_simple(d)  # raises on failure


# ---------------------------------------------------------------------------
# distance, assembly, cis_step

def test_distance_trivial_values():
    assert subspace_distance(np.zeros((3, 2))) == 0.0
    Y = np.zeros((3, 2))
    Y[0, 0] = 1.0
    assert subspace_distance(Y) == pytest.approx(1 / np.sqrt(2), rel=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000))
def test_u_orthonormal(seed):
    rng = np.random.default_rng(seed)
    p, m = rng.integers(1, 5, size=2)
    U = u_from_y(rng.standard_normal((p, m)))
    assert np.linalg.norm(U.T @ U - np.eye(p + m)) <= 1e-13 * (p + m)


def test_assemble_identity_and_eigenvalues():
    rng = np.random.default_rng(11)
    A0, F0, B = split_instance(rng, 6, 2)
    assert assemble_step(F0, A0, np.zeros((4, 2))) is F0
    As = A0 + 0.05 * B
    F1 = cis_step(F0, As).factorization
    ours = np.sort_complex(np.concatenate([np.linalg.eigvals(F1.T11),
                                           np.linalg.eigvals(F1.T22)]))
    assert np.allclose(ours, np.sort_complex(np.linalg.eigvals(As)), atol=1e-8)
    assert np.linalg.norm(F1.Q @ F1.T @ F1.Q.T - As) <= 1e-10 * np.linalg.norm(As)


def test_cis_step_identity():
    rng = np.random.default_rng(12)
    A0, F0, _ = split_instance(rng, 5, 3)
    rep = cis_step(F0, A0)
    assert rep.iterations <= 1 and rep.distance <= 1e-14 and rep.accepted


def test_cis_step_keeps_newton_blocks_for_next_predictor():
    rng = np.random.default_rng(13)
    A0, F0, B = split_instance(rng, 5, 2)
    rep = cis_step(F0, A0 + 0.05 * B, method="newton", guess="zero")
    assert rep.iterations >= 1 and rep.factorization.shifted is not None


def test_random_smooth_path_tracks_oracle():
    rng = np.random.default_rng(14)
    A0, F0, B = split_instance(rng, 6, 3)
    C = 0.2 * rng.standard_normal((6, 6))
    path = lambda s: A0 + 0.3 * np.sin(s) * B + 0.3 * s * s * C
    F = F0
    for s in np.linspace(0.01, 1.0, 100):
        rep = cis_step(F, path(s))
        F = rep.factorization
        assert principal_sine(F.Q1, eig_subspace(path(s))) <= 1e-9
        assert rep.factorization.spectral_gap > 0


def test_rotation_family_subspace():
    md = linear_test(kind="rotation")
    A, basis = md.extras["A"], md.extras["basis"]
    out = continue_subspace(factorize(A(0.0), positive), A, 1.0, 0.05)
    for s, rep in out:
        assert basis_distance(basis(s), rep.factorization.Q1) <= 1e-9


def test_diagonal_family_coordinate_planes():
    md = linear_test(kind="diagonal")
    A = md.extras["A"]
    out = continue_subspace(factorize(A(0.0), positive), A, 1.0, 0.1)
    Q1 = out[-1][1].factorization.Q1
    assert np.allclose(np.abs(Q1[3:]), 0.0, atol=1e-14)


def test_coalescing_family_signals_bifurcation():
    md = linear_test(kind="coalescing")
    A = md.extras["A"]
    with pytest.raises(BifurcationProximity):
        continue_subspace(factorize(A(0.0), positive), A, 1.0, 0.05)


def test_rejection_on_overlapping_spectra():
    F0 = factorize(np.diag([1.0, -1.0]), positive)
    with pytest.raises(CisStepRejected):
        cis_step(F0, np.diag([0.0, 0.0]))


# ---------------------------------------------------------------------------
# properties

def _instance(seed, target):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 8))
    A0, F0, B = split_instance(rng, n, int(rng.integers(1, n)))
    s = 1.0
    while kappa(form_riccati_data(F0, A0 + s * B)) >= target:
        s *= 0.7
    return form_riccati_data(F0, A0 + s * B)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 0.24))
def test_simple_iteration_contracts(seed, target):
    d = _instance(seed, target)
    h = solve_riccati_simple(d).history
    assert all(b < a for a, b in zip(h, h[1:]))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 1 / 12))
def test_newton_quadratic_constant(seed, target):
    d = _instance(seed, target)
    h = np.array(solve_riccati_newton(d).history)
    floor = 10 * np.finfo(float).eps * d.A_norm
    h = h[h > floor]
    # ||F(Y_k+1)|| <= C ||F(Y_k)||^2 with one C = 4 ||T12|| / sep^2 for the run
    C = 4 * np.linalg.norm(d.T12) / sep(d.T11, d.T22) ** 2
    assert np.all(h[1:] <= C * h[:-1] ** 2)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000))
def test_correction_form_gives_same_iterates(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 7))
    A0, F0, B = split_instance(rng, n, int(rng.integers(1, n)))
    d = form_riccati_data(F0, A0 + 0.05 * B)
    Y0 = euler_initial_guess(F0, d, "difference")
    # Riccati equation for the correction D = Y - Y0
    T11 = d.T11 + d.T12 @ Y0
    T22 = d.T22 - Y0 @ d.T12
    E21 = riccati_residual(Y0, d)
    dd = type(d)(T11=T11, T12=d.T12, T22=T22, E21=E21, E_norm=d.E_norm,
                 dA_norm=d.dA_norm, A_norm=d.A_norm)
    # Newton on the correction equation is Newton with the shifted blocks
    direct = solve_riccati_newton(d, Y0)
    corr = solve_riccati_newton(dd, None, tol=direct.history[-1] * 1.0000001)
    for a, b in zip(direct.iterates, corr.iterates):
        assert np.allclose(a, Y0 + b, atol=1e-13, rtol=0)
    # the fixed-point form keeps the unshifted operator and the correction residual
    direct = solve_riccati_simple(d, Y0)
    D = np.zeros_like(Y0)
    for a in direct.iterates:
        assert np.allclose(a, Y0 + D, atol=1e-13, rtol=0)
        D = D + solve_sylvester(d.T22, d.T11, -riccati_residual(D, dd))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_euler_gap_higher_order_than_zero(seed):
    rng = np.random.default_rng(seed)
    A0, F0, B = split_instance(rng, 4, 2)
    rel = []
    for s in (1e-2, 1e-3):
        d = form_riccati_data(F0, A0 + s * B + s * s * np.eye(4)[::-1])
        Y = solve_riccati_newton(d).Y
        Ye = euler_initial_guess(F0, d, "difference")
        rel.append(np.linalg.norm(Ye - Y) / np.linalg.norm(Y))
    assert np.log10(rel[0] / rel[1]) >= 0.9


def test_u_ode_constant_matrix_is_identity():
    rng = np.random.default_rng(15)
    A0, F0, _ = split_instance(rng, 4, 2)
    U = integrate_u_ode(F0, lambda s: A0, 1.0, Adot=lambda s: np.zeros((4, 4)))
    assert np.allclose(U, np.eye(4), atol=1e-12)


# ---------------------------------------------------------------------------
# Procrustes baseline and method comparison

def test_procrustes_identity_and_agreement():
    rng = np.random.default_rng(16)
    A0, F0, B = split_instance(rng, 6, 3)
    P = procrustes_baseline(F0, A0, positive)
    assert basis_distance(P.Q1, F0.Q1) <= 1e-12
    As = A0 + 1e-3 * B
    P = procrustes_baseline(F0, As, positive)
    C = cis_step(F0, As).factorization
    assert basis_distance(P.Q1, C.Q1) <= 1e-9
    # the aligned basis stays close to the old one, not just the same span
    assert np.linalg.norm(P.Q1 - F0.Q1) < 1e-2


def test_procrustes_costs_more_than_cis():
    rng = np.random.default_rng(17)
    A0, F0, B = split_instance(rng, 12, 6)
    path = [A0 + s * B for s in np.linspace(0.002, 0.02, 10)]
    with flop_counter() as fc_cis:
        F = F0
        for A in path:
            F = cis_step(F, A).factorization
    with flop_counter() as fc_pro:
        F = F0
        for A in path:
            F = procrustes_baseline(F, A, positive)
    assert fc_pro.total > fc_cis.total


def test_procrustes_count_mismatch():
    F0 = factorize(np.diag([1.0, -1.0]), positive)
    with pytest.raises(ValueError):
        procrustes_baseline(F0, np.diag([1.0, 1.0]), positive)


def test_compare_methods_tallies_every_pair():
    rng = np.random.default_rng(18)
    A0, F0, B = split_instance(rng, 4, 2)
    mats = [A0 + s * B for s in np.linspace(0.0, 0.2, 11)]
    stats = compare_methods([(mats, F0)])
    assert [(s.method, s.guess) for s in stats] == [
        ("simple", "zero"), ("newton", "zero"), ("simple", "euler"), ("newton", "euler")]
    for s in stats:
        assert len(s.iterations) + s.failures == 10
    means = {(s.method, s.guess): s.mean for s in stats}
    assert means["newton", "euler"] <= means["simple", "zero"]
