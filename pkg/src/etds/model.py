"""Agents, interconnection layer and control-layer graph.

An interconnected multiagent system has ``N`` agents

    dx_i/dt = A_i x_i + B_u_i u_i + B_f_i f_i(z_i, t)
    z_i     = C_z_i sum_j a^a_ij x_j

coupled physically through the agent-layer weights ``a^a_ij`` and, on the
cyber side, through a second weighted graph with pinning gains ``s_i``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConstructionError, InfeasibleTopology, NumericalFault

PD_TOL = 1e-10


def _frozen(a, ndmin=2):
    arr = np.array(a, dtype=float, ndmin=ndmin)
    arr.setflags(write=False)
    return arr


# -- nonlinearity catalog ---------------------------------------------------

def _zero(z, t, **_):
    return np.zeros_like(z)


def _saturation(z, t, limit=1.0, gain=1.0):
    return gain * np.clip(z, -limit, limit)


def _sinusoid(z, t, amplitude=1.0, frequency=1.0, omega=0.0):
    return amplitude * np.sin(frequency * z) * np.cos(omega * t)


def _tanh(z, t, lipschitz=1.0):
    return lipschitz * np.tanh(z)


# name -> (map, defaults, cone constant gamma_f with ||f(z)||^2 <= gamma_f ||z||^2)
_CATALOG: dict[str, tuple[Callable, dict, Callable[..., float]]] = {
    "zero": (_zero, {}, lambda: 0.0),
    "saturation": (_saturation, {"limit": 1.0, "gain": 1.0},
                   lambda limit, gain: gain ** 2),
    "sinusoid": (_sinusoid, {"amplitude": 1.0, "frequency": 1.0, "omega": 0.0},
                 lambda amplitude, frequency, omega: (amplitude * frequency) ** 2),
    "tanh": (_tanh, {"lipschitz": 1.0}, lambda lipschitz: lipschitz ** 2),
}

NONLINEARITIES = tuple(_CATALOG)


@dataclass(frozen=True)
class Nonlinearity:
    """Elementwise sector-bounded map selected from a fixed catalog.

    Parameters not given take the catalog defaults. Every map satisfies
    ``f(0, t) = 0`` and ``||f(z, t)||^2 <= gamma ||z||^2`` with ``gamma``
    returned by :meth:`cone_bound`.
    """

    name: str = "zero"
    params: tuple = ()

    def __post_init__(self):
        if self.name not in _CATALOG:
            raise ConstructionError(
                f"unknown nonlinearity {self.name!r}; choose from {', '.join(NONLINEARITIES)}")
        params = dict(self.params)
        defaults = _CATALOG[self.name][1]
        unknown = set(params) - set(defaults)
        if unknown:
            raise ConstructionError(
                f"nonlinearity {self.name!r} has no parameter(s) {sorted(unknown)}")
        merged = {**defaults, **{k: float(v) for k, v in params.items()}}
        for k, v in merged.items():
            if not np.isfinite(v):
                raise ConstructionError(f"nonlinearity parameter {k} must be finite")
        if self.name == "saturation" and merged["limit"] < 0:
            raise ConstructionError("saturation limit must be nonnegative")
        object.__setattr__(self, "params", tuple(sorted(merged.items())))

    @classmethod
    def from_spec(cls, name, **params):
        return cls(name, tuple(params.items()))

    def cone_bound(self) -> float:
        return float(_CATALOG[self.name][2](**dict(self.params)))

    def __call__(self, z, t=0.0):
        out = _CATALOG[self.name][0](np.asarray(z, dtype=float), t, **dict(self.params))
        if not np.all(np.isfinite(out)):
            raise NumericalFault(f"nonlinearity {self.name!r} returned non-finite values")
        return out


# -- agents and graphs -------------------------------------------------------

@dataclass(frozen=True, eq=False)
class AgentDynamics:
    """Matrices of one agent plus the bound data of its nonlinearity.

    ``gamma_f`` defaults to the catalog cone constant of the nonlinearity and
    ``gamma_cz`` to ``lambda_max(C_z^T C_z)``; explicit values must not be
    smaller than those.
    """

    A: np.ndarray
    B_u: np.ndarray
    B_f: np.ndarray | None = None
    C_z: np.ndarray | None = None
    nonlinearity: Nonlinearity = field(default_factory=Nonlinearity)
    gamma_f: float | None = None
    gamma_cz: float | None = None

    def __post_init__(self):
        A = _frozen(self.A)
        if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] < 1:
            raise ConstructionError(f"A must be square with n_x >= 1, got shape {A.shape}")
        n_x = A.shape[0]
        B_u = _frozen(self.B_u)
        if n_x == 1 and B_u.shape[0] != 1 and B_u.shape[1] == 1:
            B_u = _frozen(B_u.T)
        if B_u.ndim != 2 or B_u.shape[0] != n_x or B_u.shape[1] < 1:
            raise ConstructionError(f"B_u must be {n_x} x n_u with n_u >= 1, got {B_u.shape}")
        B_f = _frozen(np.zeros((n_x, n_x)) if self.B_f is None else self.B_f)
        if B_f.shape[0] != n_x:
            raise ConstructionError(f"B_f must have {n_x} rows, got {B_f.shape}")
        C_z = _frozen(np.eye(n_x) if self.C_z is None else self.C_z)
        if C_z.shape[1] != n_x:
            raise ConstructionError(f"C_z must have {n_x} columns, got {C_z.shape}")
        if C_z.shape[0] != B_f.shape[1]:
            raise ConstructionError(
                "elementwise nonlinearities need n_z == n_f "
                f"(C_z rows {C_z.shape[0]}, B_f columns {B_f.shape[1]})")
        for name, M in (("A", A), ("B_u", B_u), ("B_f", B_f), ("C_z", C_z)):
            if not np.all(np.isfinite(M)):
                raise ConstructionError(f"{name} has non-finite entries")
        nl = self.nonlinearity
        if not isinstance(nl, Nonlinearity):
            raise ConstructionError("nonlinearity must be a Nonlinearity instance")
        cone = nl.cone_bound()
        gamma_f = cone if self.gamma_f is None else float(self.gamma_f)
        if gamma_f < 0 or gamma_f < cone * (1 - 1e-12):
            raise ConstructionError(
                f"gamma_f={gamma_f} is below the cone constant {cone} of {nl.name!r}")
        cz = float(np.linalg.eigvalsh(C_z.T @ C_z).max())
        gamma_cz = cz if self.gamma_cz is None else float(self.gamma_cz)
        if gamma_cz < 0 or gamma_cz < cz * (1 - 1e-12):
            raise ConstructionError(
                f"gamma_cz={gamma_cz} is below lambda_max(C_z^T C_z)={cz}")
        for k, v in (("A", A), ("B_u", B_u), ("B_f", B_f), ("C_z", C_z),
                     ("gamma_f", gamma_f), ("gamma_cz", gamma_cz)):
            object.__setattr__(self, k, v)

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B_u.shape[1]

    @property
    def n_f(self) -> int:
        return self.B_f.shape[1]

    @property
    def n_z(self) -> int:
        return self.C_z.shape[0]


@dataclass(frozen=True, eq=False)
class LayerGraph:
    """Undirected weighted graph of one layer; ``pinning`` is zero for the agent layer."""

    weights: np.ndarray
    pinning: np.ndarray | None = None

    def __post_init__(self):
        W = _frozen(self.weights)
        if W.ndim != 2 or W.shape[0] != W.shape[1] or W.shape[0] < 1:
            raise ConstructionError(f"weights must be a square n x n matrix, got {W.shape}")
        n = W.shape[0]
        s = _frozen(np.zeros(n) if self.pinning is None else self.pinning, ndmin=1)
        if s.shape != (n,):
            raise ConstructionError(f"pinning must have length {n}, got shape {s.shape}")
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(s))):
            raise ConstructionError("graph weights and pinning gains must be finite")
        if np.any(W < 0) or np.any(s < 0):
            raise ConstructionError("graph weights and pinning gains must be nonnegative")
        if np.any(np.diag(W) != 0):
            raise ConstructionError("graph weights must have a zero diagonal")
        if not np.array_equal(W, W.T):
            raise ConstructionError("graph weights must be symmetric (undirected layers)")
        object.__setattr__(self, "weights", W)
        object.__setattr__(self, "pinning", s)

    @classmethod
    def empty(cls, n, pinning=None):
        return cls(np.zeros((n, n)), pinning)

    @classmethod
    def from_edges(cls, n, edges, pinning=None):
        """Build from ``(i, j, w)`` triples with 0-based indices; each edge is undirected."""
        W = np.zeros((n, n))
        for i, j, w in edges:
            W[i, j] = W[j, i] = w
        return cls(W, pinning)

    @property
    def n(self) -> int:
        return self.weights.shape[0]


def build_laplacian(g: LayerGraph) -> np.ndarray:
    """Graph Laplacian ``L = diag(row sums) - W``."""
    W = g.weights
    return np.diag(W.sum(axis=1)) - W


def build_hc(g: LayerGraph):
    """Pinned control-layer matrix and its spectral data.

    Returns
    -------
    H_c : ndarray
        ``L_c + diag(s)``.
    mu_c1 : float
        Smallest eigenvalue of ``H_c``.
    E_c_factor : ndarray
        ``H_c / mu_c1 - I``, positive semidefinite by construction.

    Raises
    ------
    InfeasibleTopology
        If ``H_c`` is not positive definite (some connected component is unpinned).
    """
    H = build_laplacian(g) + np.diag(g.pinning)
    mu = float(np.linalg.eigvalsh(H).min())
    if mu <= PD_TOL:
        raise InfeasibleTopology(
            f"H_c is not positive definite (lambda_min = {mu:.3e}); pin every connected component")
    return H, mu, H / mu - np.eye(g.n)


@dataclass(frozen=True, eq=False)
class MasSystem:
    agents: tuple
    agent_graph: LayerGraph
    control_graph: LayerGraph

    def __post_init__(self):
        agents = tuple(self.agents)
        if len(agents) < 1:
            raise ConstructionError("a system needs at least one agent")
        a0 = agents[0]
        for k, ag in enumerate(agents):
            if (ag.n_x, ag.n_u, ag.n_f, ag.n_z) != (a0.n_x, a0.n_u, a0.n_f, a0.n_z):
                raise ConstructionError(
                    f"agent {k} dimensions (n_x, n_u, n_f, n_z)="
                    f"{(ag.n_x, ag.n_u, ag.n_f, ag.n_z)} differ from agent 0")
        n = len(agents)
        for name, g in (("agent_graph", self.agent_graph), ("control_graph", self.control_graph)):
            if g.n != n:
                raise ConstructionError(f"{name} has {g.n} nodes but there are {n} agents")
        if np.any(self.agent_graph.pinning != 0):
            raise ConstructionError("the agent layer carries no pinning gains")
        object.__setattr__(self, "agents", agents)

    @property
    def N(self) -> int:
        return len(self.agents)

    @property
    def n_x(self) -> int:
        return self.agents[0].n_x

    @property
    def n_u(self) -> int:
        return self.agents[0].n_u


def eval_interconnection(sys: MasSystem, x, i: int, t: float = 0.0) -> np.ndarray:
    """Coupling signal ``z_i = C_z_i sum_j a^a_ij x_j`` from the stacked state ``x``."""
    X = np.asarray(x, dtype=float).reshape(sys.N, sys.n_x)
    return sys.agents[i].C_z @ (sys.agent_graph.weights[i] @ X)


def eval_agent_derivative(agent: AgentDynamics, x_i, u_i, z_i, t: float = 0.0) -> np.ndarray:
    x_i = np.asarray(x_i, dtype=float).reshape(agent.n_x)
    u_i = np.asarray(u_i, dtype=float).reshape(agent.n_u)
    f = agent.nonlinearity(np.asarray(z_i, dtype=float).reshape(agent.n_z), t)
    return agent.A @ x_i + agent.B_u @ u_i + agent.B_f @ f
