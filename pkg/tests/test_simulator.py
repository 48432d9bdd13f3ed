import math

import numpy as np
import pytest

from conftest import CORPUS, scalar_scenario

from etds.certify import ets_violation
from etds.dos import DoSParams, DoSSchedule
from etds.errors import InvalidStep
from etds.model import AgentDynamics, LayerGraph, MasSystem, Nonlinearity, eval_agent_derivative, eval_interconnection
from etds.scenario import load_scenario
from etds.simulator import AgentLayerField, Scenario, simulate
from etds.synthesis import DesignWeights, synthesize
from etds.trigger import TriggerParams


def _oracle(A, K, k1, k2, sigma, t_dos, attacks, x0, t_end, dt):
    """Independent event loop with the exact zero-order-hold flow of a scalar agent."""
    Phi = math.exp(A * dt)
    Gam = dt if A == 0 else (Phi - 1.0) / A
    steps = int(round(t_end / dt))
    x, xh = x0, x0
    last_try, pending = 0.0, False
    xs, evs = [x], [(0.0, "broadcast")]
    for k in range(1, steps + 1):
        t = k * dt
        x = Phi * x + Gam * K * xh
        blocked = any(h <= t < h + d or t == h for h, d in attacks)
        phi = k1 * math.exp(-sigma * t) + k2 * x * x - (K * (xh - x)) ** 2
        due = t - last_try >= t_dos - 1e-9
        if blocked:
            if due or (phi <= 0 and not pending):
                last_try, pending = t, True
                evs.append((t, "blocked_attempt"))
        elif (pending and due) or (not pending and phi <= 0):
            xh, last_try, pending = x, t, False
            evs.append((t, "broadcast"))
        xs.append(x)
    return np.array(xs), evs


@pytest.mark.parametrize("A, attacks", [(0.0, ()), (0.5, ()), (0.5, ((1.0, 0.5),)), (0.0, ((0.5, 0.25), (2.0, 0.6)))])
def test_scalar_matches_exact_zoh(A, attacks):
    sc = scalar_scenario(A=A, attacks=attacks, kappa_1=0.05, kappa_2=0.05, t_end=4.0)
    gains = synthesize(sc.sys, sc.weights)
    K = float(gains.K[0][0, 0])
    log = simulate(sc, gains)
    xs, evs = _oracle(A, K, 0.05, 0.05, 1.0, 0.1, attacks, 1.0, 4.0, 1e-3)
    np.testing.assert_allclose(log.states[:, 0], xs, atol=1e-6)
    got = [(round(e.time, 9), e.kind) for e in log.events]
    assert got == [(round(t, 9), kind) for t, kind in evs]


def test_blackout_holds_the_input():
    sc = scalar_scenario(A=0.5, attacks=((1.0, 0.5),), t_end=3.0)
    gains = synthesize(sc.sys, sc.weights)
    log = simulate(sc, gains)
    inside = (log.times >= 1.0) & (log.times < 1.5)
    assert np.ptp(log.controls[inside, 0]) == 0.0
    kinds = {e.kind for e in log.events if 1.0 <= e.time < 1.5}
    assert kinds <= {"blocked_attempt"}
    assert any(e.kind == "broadcast" and 1.5 <= e.time for e in log.events)


def test_zero_initial_state_has_no_events():
    sc = scalar_scenario(x0=0.0)
    log = simulate(sc, synthesize(sc.sys, sc.weights))
    assert [e.time for e in log.events] == [0.0]
    assert np.all(log.states == 0.0)


def _corpus(name, t_end=8.0, **kw):
    sc = load_scenario(CORPUS / name, **kw)
    sc.t_end = min(sc.t_end, t_end)
    return sc


def test_bitwise_determinism():
    sc = _corpus("oscillators_chain3_dos.yaml")
    g = synthesize(sc.sys, sc.weights)
    a, b = simulate(sc, g), simulate(sc, g)
    assert a.states.tobytes() == b.states.tobytes()
    assert [e.to_dict() for e in a.events] == [e.to_dict() for e in b.events]


@pytest.mark.parametrize("name", ["oscillators_chain3_dos.yaml", "heterogeneous3.yaml"])
def test_control_matches_held_broadcasts(name):
    sc = _corpus(name)
    g = synthesize(sc.sys, sc.weights)
    log = simulate(sc, g)
    Hk = np.kron(g.H_c, np.eye(sc.sys.n_u))
    np.testing.assert_allclose(log.controls, log.v_hats @ Hk.T, atol=1e-12)


def test_no_broadcast_inside_attacks():
    for name in ("scalar_dos.yaml", "oscillators_chain3_dos.yaml"):
        sc = _corpus(name)
        log = simulate(sc, synthesize(sc.sys, sc.weights))
        for e in log.events:
            if e.kind == "broadcast":
                assert not any(h <= e.time < h + d for h, d in sc.dos.attacks)


@pytest.mark.parametrize("dt", [1e-3, 5e-4])
def test_trigger_rule_holds_at_samples(dt):
    sc = _corpus("oscillators_chain3.yaml", dt=dt)
    g = synthesize(sc.sys, sc.weights)
    log = simulate(sc, g)
    assert ets_violation(log, g.K_bar, sc.trigger) <= 0.0


def test_vector_field_matches_per_agent(rng):
    ags = (AgentDynamics([[0, 1], [-1, 0]], np.eye(2), nonlinearity=Nonlinearity.from_spec("saturation")),
           AgentDynamics([[0, 1], [0, 0]], np.eye(2), nonlinearity=Nonlinearity.from_spec("tanh")),
           AgentDynamics([[1, 0], [0, -1]], np.eye(2), nonlinearity=Nonlinearity.from_spec("sinusoid")))
    sys = MasSystem(ags, LayerGraph.from_edges(3, [(0, 1, 0.5), (1, 2, 2.0)]), LayerGraph.empty(3, [1, 1, 1]))
    vf = AgentLayerField(sys)
    for _ in range(20):
        x, u, t = rng.normal(size=6) * 3, rng.normal(size=6), rng.uniform(0, 10)
        want = np.concatenate([eval_agent_derivative(a, x[2 * i:2 * i + 2], u[2 * i:2 * i + 2],
                                                     eval_interconnection(sys, x, i, t), t)
                               for i, a in enumerate(ags)])
        np.testing.assert_allclose(vf(x, vf.input_term(u), t), want, atol=1e-12)


@pytest.mark.parametrize("dt, t_end", [(0.03, 3.0), (0.007, 3.0), (0.001, 3.0005), (0.0, 3.0)])
def test_invalid_steps(dt, t_end):
    sc = scalar_scenario(t_end=3.0)
    sc.dt, sc.t_end = dt, t_end
    with pytest.raises(InvalidStep):
        sc.validate_step()


def test_step_must_resolve_inter_event_bound():
    sc = scalar_scenario(t_end=1.0, dt=0.01)
    with pytest.raises(InvalidStep):
        sc.validate_step(zeno_bound=0.02)
    sc.validate_step(zeno_bound=0.04)


def test_divergence_truncates_the_log():
    sys = MasSystem((AgentDynamics([[50.0]], [[1.0]]),), LayerGraph.empty(1), LayerGraph.empty(1, [1.0]))
    sc = Scenario(sys, DesignWeights.identity(sys, 0.5, 1.0), TriggerParams([1.0], [0.1], 1.0, 0.1),
                  DoSSchedule(((0.0, 20.0),), DoSParams(1.0, 100.0, 20.0, 2.0), 20.0), [[1.0]], 20.0, 0.0125)
    log = simulate(sc, synthesize(sc.sys, sc.weights))
    assert log.diverged
    assert log.times[-1] < 20.0
    assert np.all(np.isfinite(log.states))
