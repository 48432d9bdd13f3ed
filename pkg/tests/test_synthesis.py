import math

import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings
from hypothesis import strategies as st

from etds.dos import DoSParams
from etds.errors import InvalidSigma, InvalidWeights, NotStabilizable, NotStable
from etds.model import AgentDynamics, LayerGraph, MasSystem, Nonlinearity
from etds.synthesis import (DesignWeights, build_validation_matrix, care_residual, compute_gain,
                            compute_rates, design_property_residuals, solve_care, solve_lyapunov,
                            synthesize, zeno_gap_bound)
from etds.trigger import TriggerParams

from conftest import scalar_system


def test_lyapunov_scalar():
    assert solve_lyapunov([[-1.0]], [[2.0]])[0, 0] == pytest.approx(1.0, abs=1e-14)


def test_lyapunov_decoupled():
    np.testing.assert_allclose(solve_lyapunov(-np.eye(2), np.eye(2)), np.eye(2) / 2, atol=1e-14)


def test_lyapunov_companion_against_brute_force():
    A = np.array([[0.0, 1.0], [-2.0, -3.0]])
    X = solve_lyapunov(A, np.eye(2))
    # column-major vec oracle, independent of the solver's row-major layout
    M = np.kron(np.eye(2), A.T) + np.kron(A.T, np.eye(2))
    X_ref = np.linalg.solve(M, -np.eye(2).reshape(-1, order="F")).reshape(2, 2, order="F")
    np.testing.assert_allclose(X, X_ref, atol=1e-12)
    assert np.linalg.norm(A.T @ X + X @ A + np.eye(2)) <= 1e-10
    np.testing.assert_allclose(X, sla.solve_continuous_lyapunov(A.T, -np.eye(2)), atol=1e-12)


def test_lyapunov_rejects_unstable():
    with pytest.raises(NotStable):
        solve_lyapunov([[0.0, 1.0], [0.0, 0.0]], np.eye(2))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_lyapunov_random_stable(n, seed):
    r = np.random.default_rng(seed)
    A = r.normal(size=(n, n))
    A -= (np.linalg.eigvals(A).real.max() + r.uniform(0.1, 2.0)) * np.eye(n)
    C = r.normal(size=(n, n))
    Q = C @ C.T
    X = solve_lyapunov(A, Q)
    assert np.linalg.norm(A.T @ X + X @ A + Q) <= 1e-10 * max(1.0, np.linalg.norm(Q))
    np.testing.assert_array_equal(X, X.T)
    assert np.linalg.eigvalsh(X).min() >= -1e-12


def _care(A, B, mu=1.0):
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    ag = AgentDynamics(A, B)
    return solve_care(ag, np.eye(A.shape[0]), np.eye(B.shape[1]), mu)


def test_care_closed_forms():
    P, res = _care([[0.0]], [[1.0]])
    assert P[0, 0] == pytest.approx(1.0, abs=1e-12) and res <= 1e-9
    P, res = _care([[-1.0]], [[1.0]])
    assert P[0, 0] == pytest.approx(math.sqrt(2) - 1, abs=1e-12) and res <= 1e-9
    P, res = _care(-np.eye(2), np.eye(2))
    np.testing.assert_allclose(P, (math.sqrt(2) - 1) * np.eye(2), atol=1e-12)


def test_care_double_integrator_matches_scipy():
    A = np.array([[0.0, 1.0], [0.0, 0.0]])
    B = np.array([[0.0], [1.0]])
    P, res = _care(A, B, mu=0.7)
    np.testing.assert_allclose(P, sla.solve_continuous_are(A, 0.7 * B, np.eye(2), np.eye(1)), atol=1e-10)


def test_care_not_stabilizable():
    with pytest.raises(NotStabilizable):
        _care([[1.0, 0.0], [0.0, 2.0]], [[1.0], [0.0]])


def test_gain_examples():
    assert compute_gain([[1.0]], [[1.0]], [[1.0]], 1.0)[0, 0] == -1.0
    assert compute_gain([[math.sqrt(2) - 1]], [[1.0]], [[1.0]], 1.0)[0, 0] == pytest.approx(-(math.sqrt(2) - 1))
    with pytest.warns(UserWarning, match="uncontrollable"):
        K = compute_gain(np.eye(2), np.eye(1), np.zeros((2, 1)), 1.0)
    np.testing.assert_array_equal(K, 0.0)
    with pytest.raises(InvalidWeights):
        compute_gain([[1.0]], [[0.0]], [[1.0]], 1.0)


def test_weights_must_be_spd():
    with pytest.raises(InvalidWeights):
        DesignWeights((np.eye(1),), (-np.eye(1),), 0.5, 1.0)
    with pytest.raises(InvalidWeights):
        DesignWeights((np.eye(1),), (np.eye(1),), 0.0, 1.0)


def _random_system(r, N):
    n_x = int(r.integers(1, 5))
    n_u = int(r.integers(1, n_x + 1))
    agents = tuple(AgentDynamics(r.normal(size=(n_x, n_x)), r.normal(size=(n_x, n_u))) for _ in range(N))
    W = np.triu(r.uniform(0.2, 1.5, (N, N)) * (r.random((N, N)) < 0.6), 1)
    ctrl = LayerGraph(W + W.T, r.uniform(0.3, 1.5, N))
    return MasSystem(agents, LayerGraph.empty(N), ctrl)


def test_design_identities_on_random_systems(rng):
    for _ in range(10):
        sys = _random_system(rng, int(rng.integers(1, 4)))
        w = DesignWeights.identity(sys, 0.5, 1.0)
        g = synthesize(sys, w)
        first, second = design_property_residuals(sys, g, w, n_samples=1000, seed=1)
        assert first <= 1e-8 and second <= 1e-9


def test_qv_scalar_example():
    sys = scalar_system()
    for a_e in (0.1, 0.5, 0.9):
        w = DesignWeights.identity(sys, a_e, 1.0)
        Q, ok = build_validation_matrix(sys, synthesize(sys, w), w)
        assert Q[0, 0] == pytest.approx(2 - a_e, abs=1e-12) and ok


def test_qv_kappa_shift():
    sys = scalar_system()
    w = DesignWeights.identity(sys, 0.5, 1.0)
    Q, _ = build_validation_matrix(sys, synthesize(sys, w), w, kappa_2=0.1)
    assert Q[0, 0] == pytest.approx(1.5 - 0.2, abs=1e-12)


def _coupled_pair(gain):
    nl = Nonlinearity.from_spec("saturation", limit=1.0, gain=gain)
    ag = AgentDynamics([[0.5]], [[1.0]], B_f=[[0.5]], nonlinearity=nl)
    return MasSystem((ag, ag), LayerGraph.from_edges(2, [(0, 1, 1.0)]),
                     LayerGraph.from_edges(2, [(0, 1, 1.0)], [1.0, 1.0]))


def test_qv_huge_gamma_is_not_positive():
    sys = _coupled_pair(100.0)
    w = DesignWeights.identity(sys, 0.5, 1.0)
    _, ok = build_validation_matrix(sys, synthesize(sys, w), w)
    assert not ok


def test_qv_two_agent_eigen_oracle():
    sys = _coupled_pair(0.5)
    w = DesignWeights.identity(sys, 0.3, 1.0)
    g = synthesize(sys, w)
    Q, ok = build_validation_matrix(sys, g, w)
    # hand assembly for scalar agents, A_a = [[0,1],[1,0]], H = [[2,-1],[-1,2]], mu = 1
    p = g.P[0][0, 0]
    k = g.K[0][0, 0]
    H = np.array([[2.0, -1.0], [-1.0, 2.0]])
    mu = 1.0
    inner = np.eye(2) + 2 * (H / mu - np.eye(2)) - 0.3 * H @ H / mu ** 2
    Q_ref = np.eye(2) - 1.0 * 0.25 * np.eye(2) - (p * 0.5) ** 2 * np.eye(2) + k * k * inner
    np.testing.assert_allclose(Q, Q_ref, atol=1e-12)
    assert np.linalg.eigvalsh(Q).min() == pytest.approx(np.linalg.eigvals(Q_ref).real.min(), abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.0, 2.0), st.floats(0.0, 2.0))
def test_qv_monotone_in_gamma_f(g1, g2):
    lo, hi = sorted((g1, g2))
    lam = []
    for gamma in (lo, hi):
        ag = AgentDynamics([[0.2]], [[1.0]], B_f=[[0.3]], gamma_f=gamma,
                           nonlinearity=Nonlinearity.from_spec("zero"))
        sys = MasSystem((ag, ag), LayerGraph.from_edges(2, [(0, 1, 0.8)]),
                        LayerGraph.from_edges(2, [(0, 1, 1.0)], [1.0, 1.0]))
        w = DesignWeights.identity(sys, 0.3, 1.0)
        Q, _ = build_validation_matrix(sys, synthesize(sys, w), w)
        lam.append(np.linalg.eigvalsh(Q).min())
    assert lam[1] <= lam[0] + 1e-12


def test_explicit_form_never_looser_than_scalar():
    nl = Nonlinearity.from_spec("tanh", lipschitz=0.7)
    ag = AgentDynamics(np.eye(2) * 0.1, np.eye(2), B_f=0.2 * np.eye(2), C_z=[[1.0, 0.5], [0.0, 0.3]],
                       nonlinearity=nl)
    sys = MasSystem((ag, ag), LayerGraph.from_edges(2, [(0, 1, 0.5)]), LayerGraph.empty(2, [1.0, 1.0]))
    lam = {}
    for form in ("scalar", "explicit"):
        w = DesignWeights.identity(sys, 0.3, 1.0, qv_form=form)
        Q, _ = build_validation_matrix(sys, synthesize(sys, w), w)
        lam[form] = np.linalg.eigvalsh(Q).min()
    assert lam["explicit"] >= lam["scalar"] - 1e-12


def _rates(sigma=0.5, params=DoSParams(1.0, 5.0, 0.5, 10.0), a_e=1.0, kappa_2=0.1, t_dos=0.1):
    sys = scalar_system()
    w = DesignWeights.identity(sys, a_e, 1.0)
    g = synthesize(sys, w)
    tr = TriggerParams([0.1], [kappa_2], sigma, t_dos)
    Q, _ = build_validation_matrix(sys, g, w, kappa_2)
    return compute_rates(sys, g, w, Q, tr, params, [[1.0]])


def test_rates_tau_star_and_pi_star():
    r = _rates(params=DoSParams(1.0, 1.0, 0.5, 2.0), t_dos=0.1)
    assert 1 / r.tau_star == pytest.approx(0.6)
    assert r.tau_star == pytest.approx(5 / 3)
    assert r.pi_star == pytest.approx(0.6)


def test_rates_rho_dos_scalar():
    r = _rates(a_e=1.0, kappa_2=0.01, sigma=0.5)
    assert r.rho_dos == pytest.approx(4.0, abs=1e-12)
    assert r.rho_v == pytest.approx(1.0 - 0.01, abs=1e-12)


def test_condition15_arithmetic():
    # rho_v=1, rho_dos=4, sigma=0.2, tau*=5.5
    lower, upper, inv = (1 - 0.2) / 5, 1 / 5, 1 / 5.5
    assert (lower, upper) == pytest.approx((0.16, 0.2))
    assert lower < inv < upper


def test_condition15_from_report():
    r = _rates(sigma=1.0, a_e=0.5)
    assert r.condition15_lower == pytest.approx((r.rho_v - 1.0) / (r.rho_v + r.rho_dos))
    assert r.condition15_upper == pytest.approx(r.rho_v / (r.rho_v + r.rho_dos))
    assert r.condition15_holds == (r.condition15_lower < 1 / r.tau_star < r.condition15_upper)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.05, 5.0), st.floats(0.01, 50.0), st.floats(0.0, 0.99), st.floats(1.01, 100.0),
       st.floats(0.5, 100.0), st.floats(0.01, 1.0), st.floats(0.01, 100.0))
def test_condition15_time_rescaling(rho_v, rho_dos, frac, tau_d, tau_f, t_dos, c):
    # time in units of 1/c: rates scale by c, tau_f and t_dos by 1/c, tau_d is a pure ratio
    sigma = frac * rho_v

    def holds(rv, rd, s, p, td):
        inv = 1 / p.star(td)[1]
        return (rv - s) / (rv + rd) < inv < rv / (rv + rd), inv

    p = DoSParams(1.0, tau_f, 0.5, tau_d)
    q = DoSParams(1.0, tau_f / c, 0.5, tau_d)
    a, inv_a = holds(rho_v, rho_dos, sigma, p, t_dos)
    b, inv_b = holds(c * rho_v, c * rho_dos, c * sigma, q, t_dos / c)
    assert inv_a == pytest.approx(inv_b, rel=1e-12)
    lo, hi = (rho_v - sigma) / (rho_v + rho_dos), rho_v / (rho_v + rho_dos)
    if min(abs(inv_a - lo), abs(inv_a - hi)) > 1e-9:
        assert a == b


def test_rates_invalid_sigma():
    with pytest.raises(InvalidSigma):
        _rates(sigma=5.0)


def test_rates_without_dos_params():
    r = _rates(params=None)
    assert math.isinf(r.tau_star) and r.pi_star == 0.0 and r.b_dos == 1.0
    assert not r.condition15_holds


def test_rate_constants_scalar_closed_form():
    r = _rates(sigma=0.5, a_e=0.5, kappa_2=0.1)
    # P=1, K=-1, Q = 2 - a_e - kappa_2/a_e = 1.3
    rho_v = 1.3
    b2 = 0.1 / (0.5 * (rho_v - 0.5))
    b1 = 1.0 + b2
    b3 = 0.1 + b1 * 0.1
    # A_e = 0 + 1*(-1) = -1, no neighbours, no nonlinearity
    b4 = 1.0 * math.sqrt(b1) + 1.0 * 1.0 * math.sqrt(b3)
    assert r.rho_v == pytest.approx(rho_v)
    assert r.b_2 == pytest.approx(b2)
    assert r.b_1 == pytest.approx(b1)
    assert r.b_3[0] == pytest.approx(b3)
    assert r.b_4[0] == pytest.approx(b4)
    assert r.zeno_bounds[0] == pytest.approx(zeno_gap_bound(0.5, 0.1, b4))


def test_zeno_closed_form():
    assert zeno_gap_bound(1.0, 4.0, 1.0) == pytest.approx(2 * math.log(2), abs=1e-12)
    vals = [zeno_gap_bound(1.0, k, 1.0) for k in (1e-2, 1e-4, 1e-8)]
    assert vals[0] > vals[1] > vals[2] > 0


def test_rank_deficient_gain_has_no_b3():
    A = np.array([[0.0, 1.0], [0.0, 0.0]])
    ag = AgentDynamics(A, [[0.0], [1.0]])
    sys = MasSystem((ag,), LayerGraph.empty(1), LayerGraph.empty(1, [1.0]))
    w = DesignWeights.identity(sys, 0.2, 1.0)
    g = synthesize(sys, w)
    Q, _ = build_validation_matrix(sys, g, w, 0.01)
    r = compute_rates(sys, g, w, Q, TriggerParams([0.1], [0.01], 0.1, 0.1), None, [[1.0, 0.0]])
    assert math.isinf(r.b_3[0]) and math.isnan(r.zeno_bounds[0])
