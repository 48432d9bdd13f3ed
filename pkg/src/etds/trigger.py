"""Hybrid broadcast strategy: event-triggered when the network is up, periodic retry under DoS.

Agent ``i`` broadcasts ``x_i`` whenever

    phi_i = kappa_1i exp(-sigma t) + kappa_2i ||x_i||^2 - ||K_i (x_hat_i - x_i)||^2 <= 0

and the network is available.  Once a broadcast is blocked, the agent retries
every ``t_dos`` until one gets through; neighbours keep using the last value
they received (zero-order hold).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConstructionError

# slack on "t - last_attempt >= t_dos" for step-aligned times
TIME_EPS = 1e-9


@dataclass(frozen=True, eq=False)
class TriggerParams:
    kappa_1: np.ndarray
    kappa_2: np.ndarray
    sigma: float
    t_dos: float

    def __post_init__(self):
        k1 = np.array(self.kappa_1, dtype=float, ndmin=1)
        k2 = np.array(self.kappa_2, dtype=float, ndmin=1)
        if k1.shape != k2.shape or k1.ndim != 1:
            raise ConstructionError("kappa_1 and kappa_2 must be vectors of equal length")
        for name, v in (("kappa_1", k1), ("kappa_2", k2)):
            if not np.all(np.isfinite(v)) or np.any(v <= 0):
                raise ConstructionError(f"all {name} entries must be strictly positive")
        for name in ("sigma", "t_dos"):
            v = float(getattr(self, name))
            if not (v > 0 and math.isfinite(v)):
                raise ConstructionError(f"{name} must be a positive finite scalar")
            object.__setattr__(self, name, v)
        k1.setflags(write=False)
        k2.setflags(write=False)
        object.__setattr__(self, "kappa_1", k1)
        object.__setattr__(self, "kappa_2", k2)

    def __eq__(self, other):
        if not isinstance(other, TriggerParams):
            return NotImplemented
        return (np.array_equal(self.kappa_1, other.kappa_1) and np.array_equal(self.kappa_2, other.kappa_2)
                and self.sigma == other.sigma and self.t_dos == other.t_dos)


class Decision(Enum):
    HOLD = "hold"
    BROADCAST = "broadcast"
    BLOCKED_ATTEMPT = "blocked_attempt"


@dataclass
class BufferState:
    """Held broadcast values of every agent.

    ``pending[i]`` marks an agent whose last attempt was blocked; it stays in
    periodic retry mode until a broadcast succeeds.
    """

    x_hat: np.ndarray
    v_hat: np.ndarray
    last_broadcast_time: np.ndarray
    last_attempt_time: np.ndarray
    pending: np.ndarray

    @classmethod
    def initial(cls, x, K, t=0.0):
        """Everybody broadcasts its exact state at ``t``."""
        x = np.array(x, dtype=float)
        N = x.shape[0]
        v = np.stack([K[i] @ x[i] for i in range(N)])
        return cls(x.copy(), v, np.full(N, float(t)), np.full(N, float(t)), np.zeros(N, dtype=bool))

    def broadcast(self, i, t, x_i, K_i):
        self.x_hat[i] = x_i
        self.v_hat[i] = K_i @ x_i
        self.last_broadcast_time[i] = t
        self.last_attempt_time[i] = t
        self.pending[i] = False

    def block(self, i, t):
        self.last_attempt_time[i] = t
        self.pending[i] = True


def eval_phi(t, x_i, x_hat_i, K_i, params: TriggerParams, i: int) -> float:
    e_v = K_i @ (np.asarray(x_hat_i, dtype=float) - np.asarray(x_i, dtype=float))
    x_i = np.asarray(x_i, dtype=float)
    return float(params.kappa_1[i] * math.exp(-params.sigma * t)
                 + params.kappa_2[i] * (x_i @ x_i) - e_v @ e_v)


def phi_all(t, X, X_hat, K_stack, params: TriggerParams) -> np.ndarray:
    """``eval_phi`` for every agent at once; ``K_stack`` has shape ``(N, n_u, n_x)``."""
    E = np.einsum("nij,nj->ni", K_stack, X_hat - X)
    return (params.kappa_1 * math.exp(-params.sigma * t)
            + params.kappa_2 * np.einsum("ni,ni->n", X, X) - np.einsum("ni,ni->n", E, E))


def next_broadcast(t, i, dos_active, phi, params: TriggerParams, buffer: BufferState) -> Decision:
    """Decide what agent ``i`` does at step time ``t`` given its trigger value ``phi``.

    Under DoS an attempt is made when the trigger fires (first attempt) or a
    retry period has elapsed since the last attempt; it is always blocked.
    Without DoS, a pending agent broadcasts at its next retry instant and any
    other agent broadcasts when ``phi <= 0``.
    """
    due = t - buffer.last_attempt_time[i] >= params.t_dos - TIME_EPS
    if dos_active:
        if due or (phi <= 0 and not buffer.pending[i]):
            return Decision.BLOCKED_ATTEMPT
        return Decision.HOLD
    if buffer.pending[i]:
        return Decision.BROADCAST if due else Decision.HOLD
    return Decision.BROADCAST if phi <= 0 else Decision.HOLD


def control_input(i, buffers: BufferState, control_graph) -> np.ndarray:
    """``u_i = sum_j a^c_ij (v_hat_i - v_hat_j) + s_i v_hat_i`` from held values."""
    W = control_graph.weights
    v = buffers.v_hat
    return (W[i].sum() + control_graph.pinning[i]) * v[i] - W[i] @ v


def control_all(H_c, v_hat) -> np.ndarray:
    """Row-stacked ``(H_c kron I) v_hat`` for ``v_hat`` of shape ``(N, n_u)``."""
    return H_c @ v_hat
