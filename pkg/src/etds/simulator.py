"""Fixed-step simulation of the two-layer closed loop under the hybrid broadcast strategy.

Each step: query the attack schedule, let every agent decide (hold, broadcast
or blocked attempt), refresh the held control ``u = (H_c kron I) v_hat`` and
advance the agent equations with classical RK4 while ``u`` stays constant.
Events therefore land on step boundaries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import block_diag

from .dos import DoSSchedule, is_active
from .errors import Diverged, InvalidStep, ModelError
from .model import MasSystem
from .synthesis import DesignWeights
from .trigger import BufferState, Decision, TriggerParams, next_broadcast

__all__ = ["Scenario", "TrajectoryLog", "Event", "simulate", "is_active", "AgentLayerField"]

STEP_EPS = 1e-9
DIVERGENCE_LIMIT = 1e150


@dataclass(eq=False)
class Scenario:
    sys: MasSystem
    weights: DesignWeights
    trigger: TriggerParams
    dos: DoSSchedule
    x0: np.ndarray
    t_end: float
    dt: float
    scenario_id: str = "scenario"

    def __post_init__(self):
        self.x0 = np.array(self.x0, dtype=float).reshape(self.sys.N, self.sys.n_x)
        self.t_end = float(self.t_end)
        self.dt = float(self.dt)

    def __eq__(self, other):
        if not isinstance(other, Scenario):
            return NotImplemented
        from .scenario import to_document
        return to_document(self) == to_document(other)

    @property
    def steps(self) -> int:
        return int(round(self.t_end / self.dt))

    def validate_step(self, zeno_bound=None):
        """Enforce ``dt <= t_dos/4`` (and ``<= zeno_bound/4`` when known) on a grid that fits.

        ``t_end`` and ``t_dos`` must be integer multiples of ``dt`` so that
        retries and the horizon land on the step grid.
        """
        dt, t_dos = self.dt, self.trigger.t_dos
        if not (dt > 0 and self.t_end > 0):
            raise InvalidStep("dt and t_end must be positive")
        for name, v in (("t_end", self.t_end), ("t_dos", t_dos)):
            m = v / dt
            if abs(m - round(m)) > STEP_EPS * max(1.0, m):
                raise InvalidStep(f"{name}={v} is not an integer multiple of dt={dt}")
        if dt > t_dos / 4 * (1 + STEP_EPS):
            raise InvalidStep(f"dt={dt} exceeds t_dos/4={t_dos / 4}")
        if zeno_bound is not None and math.isfinite(zeno_bound) and dt > zeno_bound / 4:
            raise InvalidStep(f"dt={dt} exceeds a quarter of the inter-event bound {zeno_bound:.4g}")


@dataclass
class Event:
    time: float
    agent: int
    kind: str
    phi: float

    def to_dict(self):
        return {"time": self.time, "agent": self.agent, "kind": self.kind,
                "phi_value": None if math.isnan(self.phi) else self.phi}


@dataclass(eq=False)
class TrajectoryLog:
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    v_hats: np.ndarray
    x_hats: np.ndarray
    events: list
    dos: DoSSchedule
    dt: float
    N: int
    n_x: int
    n_u: int
    onset_states: dict = field(default_factory=dict)
    diverged: bool = False
    lyapunov: np.ndarray | None = None

    def agent_states(self):
        return self.states.reshape(len(self.times), self.N, self.n_x)

    def broadcast_times(self, i):
        return np.array([e.time for e in self.events if e.agent == i and e.kind == "broadcast"])

    def event_counts(self):
        counts = {}
        for e in self.events:
            c = counts.setdefault(e.agent, {"broadcast": 0, "blocked_attempt": 0})
            c[e.kind] += 1
        return [counts.get(i, {"broadcast": 0, "blocked_attempt": 0}) for i in range(self.N)]


class AgentLayerField:
    """Vector field of all agents on the flat stacked state.

    Block-diagonal matrices apply each agent's own ``A_i``, ``B_u_i``, ``B_f_i``
    and ``C_z_i``; the result equals evaluating every agent separately.
    """

    def __init__(self, sys: MasSystem):
        ag = sys.agents
        self.A = block_diag(*[a.A for a in ag])
        self.Bu = block_diag(*[a.B_u for a in ag])
        self.Bf = block_diag(*[a.B_f for a in ag])
        self.Cz = block_diag(*[a.C_z for a in ag])
        self.Aa = np.kron(sys.agent_graph.weights, np.eye(sys.n_x))
        self.N, self.n_x = sys.N, sys.n_x
        self.cone = np.array([a.gamma_f * a.gamma_cz for a in ag])
        n_z = ag[0].n_z
        groups = {}
        for i, a in enumerate(ag):
            groups.setdefault(a.nonlinearity, []).extend(range(i * n_z, (i + 1) * n_z))
        self.groups = [(nl, np.array(idx)) for nl, idx in groups.items() if nl.name != "zero"]
        self.whole = len(self.groups) == 1 and len(self.groups[0][1]) == sys.N * n_z
        self.n_f_total = sys.N * ag[0].n_f

    def input_term(self, u):
        return self.Bu @ u

    def nonlinear(self, x, t):
        zpre = self.Aa @ x
        if not self.groups:
            return None, zpre
        z = self.Cz @ zpre
        if self.whole:
            return self.groups[0][0](z, t), zpre
        f = np.zeros(self.n_f_total)
        for nl, idx in self.groups:
            f[idx] = nl(z[idx], t)
        return f, zpre

    def __call__(self, x, bu, t):
        f, _ = self.nonlinear(x, t)
        dx = self.A @ x + bu
        if f is not None:
            dx += self.Bf @ f
        return dx

    def check_cone(self, x, t):
        f, zpre = self.nonlinear(x, t)
        if f is None:
            return
        lhs = (f * f).reshape(self.N, -1).sum(axis=1)
        rhs = self.cone * (zpre * zpre).reshape(self.N, -1).sum(axis=1)
        bad = np.nonzero(lhs > rhs * (1 + 1e-9) + 1e-300)[0]
        if bad.size:
            i = int(bad[0])
            raise ModelError(f"agent {i} at t={t}: ||f||^2={lhs[i]:.6g} exceeds the cone bound {rhs[i]:.6g}")

    def rk4(self, x, bu, t, h):
        k1 = self(x, bu, t)
        k2 = self(x + 0.5 * h * k1, bu, t + 0.5 * h)
        k3 = self(x + 0.5 * h * k2, bu, t + 0.5 * h)
        k4 = self(x + h * k3, bu, t + h)
        return x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def simulate(sc: Scenario, gains, zeno_bound=None) -> TrajectoryLog:
    """Integrate the closed loop and log states, held signals and events.

    ``zeno_bound``, when given, is the smallest inter-event lower bound over
    agents and constrains the step size.  A non-finite state ends the run; the
    returned log is truncated and flagged ``diverged``.
    """
    sc.validate_step(zeno_bound)
    sys, trig, dos = sc.sys, sc.trigger, sc.dos
    N, n_x, n_u = sys.N, sys.n_x, sys.n_u
    dt, steps = sc.dt, sc.steps
    vf = AgentLayerField(sys)
    K = gains.K
    K_bar = gains.K_bar
    Hk = np.kron(gains.H_c, np.eye(n_u))
    k1, k2, sigma = trig.kappa_1, trig.kappa_2, trig.sigma

    times = np.arange(steps + 1) * dt
    states = np.full((steps + 1, N * n_x), np.nan)
    controls = np.full((steps + 1, N * n_u), np.nan)
    v_hats = np.full((steps + 1, N * n_u), np.nan)
    x_hats = np.full((steps + 1, N * n_x), np.nan)

    x = sc.x0.reshape(-1).copy()
    buf = BufferState.initial(sc.x0, K)
    events = [Event(0.0, i, "broadcast", math.nan) for i in range(N)]
    onsets = list(dos.onsets)
    next_onset = 0
    onset_states = {}
    states[0] = x
    last = steps
    diverged = False
    u = Hk @ buf.v_hat.reshape(-1)
    for k in range(steps + 1):
        t = float(times[k])
        if k:
            active = is_active(dos, t)
            X = x.reshape(N, n_x)
            e = (K_bar @ (buf.x_hat.reshape(-1) - x)).reshape(N, n_u)
            phi = k1 * math.exp(-sigma * t) + k2 * (X * X).sum(axis=1) - (e * e).sum(axis=1)
            if active or buf.pending.any() or (phi <= 0).any():
                changed = False
                for i in range(N):
                    d = next_broadcast(t, i, active, phi[i], trig, buf)
                    if d is Decision.BROADCAST:
                        buf.broadcast(i, t, X[i], K[i])
                        events.append(Event(t, i, "broadcast", float(phi[i])))
                        changed = True
                    elif d is Decision.BLOCKED_ATTEMPT:
                        buf.block(i, t)
                        events.append(Event(t, i, "blocked_attempt", float(phi[i])))
                if changed:
                    u = Hk @ buf.v_hat.reshape(-1)
        controls[k] = u
        v_hats[k] = buf.v_hat.reshape(-1)
        x_hats[k] = buf.x_hat.reshape(-1)
        vf.check_cone(x, t)
        bu = vf.input_term(u)
        # state at attack onsets falling at or inside this step
        while next_onset < len(onsets) and onsets[next_onset] < t + dt and k < steps:
            h = onsets[next_onset]
            if h >= t:
                onset_states[next_onset] = x.copy() if h == t else vf.rk4(x, bu, t, h - t)
            next_onset += 1
        if k == steps:
            break
        with np.errstate(over="ignore", invalid="ignore"):
            x = vf.rk4(x, bu, t, dt)
        if not np.all(np.isfinite(x)) or np.abs(x).max() > DIVERGENCE_LIMIT:
            diverged, last = True, k
            break
        states[k + 1] = x
    if next_onset < len(onsets) and not diverged and onsets[next_onset] == times[last]:
        onset_states[next_onset] = states[last].copy()

    sl = slice(0, last + 1)
    return TrajectoryLog(times[sl], states[sl], controls[sl], v_hats[sl], x_hats[sl],
                         events, dos, dt, N, n_x, n_u, onset_states, diverged)


def raise_if_diverged(log: TrajectoryLog):
    if log.diverged:
        raise Diverged(f"state became non-finite after t={log.times[-1]}")
