"""Riccati-based gain synthesis and the rate constants of the stability certificate.

Each agent solves

    A_i^T P_i + P_i A_i + W_x_i - mu_c1^2 P_i B_u_i W_v_i^{-1} B_u_i^T P_i = 0

and uses ``K_i = -mu_c1 W_v_i^{-1} B_u_i^T P_i`` where ``mu_c1`` is the
smallest eigenvalue of the pinned control-layer matrix ``H_c``.  The stacked
validation matrix ``Q_v`` and the constants derived from it decide whether the
closed loop is certified, with and without DoS.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import block_diag

from .errors import (ConvergenceFailure, InvalidSigma, InvalidWeights,
                     NotStabilizable, NotStable)
from .model import PD_TOL, MasSystem, build_hc, build_laplacian

CARE_TOL = 1e-9
LYAP_TOL = 1e-10
MAX_NEWTON_ITER = 200
QV_FORMS = ("scalar", "explicit")


def _spd(M, name):
    M = np.array(M, dtype=float, ndmin=2)
    if M.shape[0] != M.shape[1]:
        raise InvalidWeights(f"{name} must be square, got {M.shape}")
    if not np.allclose(M, M.T, rtol=0, atol=1e-12 * max(1.0, np.abs(M).max())):
        raise InvalidWeights(f"{name} must be symmetric")
    M = 0.5 * (M + M.T)
    if np.linalg.eigvalsh(M).min() <= PD_TOL:
        raise InvalidWeights(f"{name} must be positive definite")
    M.setflags(write=False)
    return M


@dataclass(frozen=True, eq=False)
class DesignWeights:
    """Per-agent Riccati weights and the two Young-inequality constants.

    ``qv_form`` selects how the nonlinearity bound enters ``Q_v``: ``"scalar"``
    uses ``gamma_f * gamma_cz`` on ``(A_a kron I) x``, ``"explicit"`` keeps
    ``C_z`` inside the quadratic form and uses ``gamma_f`` alone.
    """

    W_x: tuple
    W_v: tuple
    a_e: float
    a_f: float
    qv_form: str = "scalar"

    def __post_init__(self):
        if len(self.W_x) != len(self.W_v):
            raise InvalidWeights("W_x and W_v need one entry per agent")
        object.__setattr__(self, "W_x", tuple(_spd(w, f"W_x[{k}]") for k, w in enumerate(self.W_x)))
        object.__setattr__(self, "W_v", tuple(_spd(w, f"W_v[{k}]") for k, w in enumerate(self.W_v)))
        for name in ("a_e", "a_f"):
            v = float(getattr(self, name))
            if not (v > 0 and math.isfinite(v)):
                raise InvalidWeights(f"{name} must be a positive finite scalar, got {v}")
            object.__setattr__(self, name, v)
        if self.qv_form not in QV_FORMS:
            raise InvalidWeights(f"qv_form must be one of {QV_FORMS}, got {self.qv_form!r}")

    @classmethod
    def identity(cls, sys: MasSystem, a_e, a_f, qv_form="scalar"):
        return cls(tuple(np.eye(sys.n_x) for _ in range(sys.N)),
                   tuple(np.eye(sys.n_u) for _ in range(sys.N)), a_e, a_f, qv_form)


@dataclass(frozen=True, eq=False)
class GainSet:
    P: tuple
    K: tuple
    care_residual: tuple
    mu_c1: float
    H_c: np.ndarray

    @property
    def P_bar(self):
        return block_diag(*self.P)

    @property
    def K_bar(self):
        return block_diag(*self.K)


# -- matrix equations ----------------------------------------------------------

def is_hurwitz(A) -> bool:
    return bool(np.linalg.eigvals(A).real.max() < 0)


def solve_lyapunov(A_cl, Q):
    """Solve ``A_cl^T X + X A_cl + Q = 0`` through its Kronecker linear system.

    Raises
    ------
    NotStable
        If ``A_cl`` is not Hurwitz.
    """
    A = np.array(A_cl, dtype=float, ndmin=2)
    Q = np.array(Q, dtype=float, ndmin=2)
    n = A.shape[0]
    if A.shape != (n, n) or Q.shape != (n, n):
        raise ValueError(f"shape mismatch: A {A.shape}, Q {Q.shape}")
    if not is_hurwitz(A):
        raise NotStable(f"A_cl is not Hurwitz (max Re eig = {np.linalg.eigvals(A).real.max():.3e})")
    I = np.eye(n)
    # row-major vec: vec(A^T X) = (A^T kron I) vec X, vec(X A) = (I kron A^T) vec X
    L = np.kron(A.T, I) + np.kron(I, A.T)
    X = np.linalg.solve(L, -Q.reshape(-1)).reshape(n, n)
    X = 0.5 * (X + X.T)
    r = A.T @ X + X @ A + Q
    if np.linalg.norm(r) > LYAP_TOL * max(1.0, np.linalg.norm(Q)):
        # one step of iterative refinement
        dX = np.linalg.solve(L, -r.reshape(-1)).reshape(n, n)
        X = X + 0.5 * (dX + dX.T)
    return X


def care_residual(A, B, W_x, W_v, mu, P) -> float:
    R = A.T @ P + P @ A + W_x - mu ** 2 * P @ B @ np.linalg.solve(W_v, B.T @ P)
    return float(np.linalg.norm(R, "fro"))


def _is_stabilizable(A, B):
    n = A.shape[0]
    for lam in np.linalg.eigvals(A):
        if lam.real >= -1e-12:
            M = np.hstack([A - lam * np.eye(n), B])
            if np.linalg.matrix_rank(M, tol=1e-9 * max(1.0, np.abs(M).max())) < n:
                return False
    return True


def _initial_gain(A, Bt):
    """Stabilizing feedback ``F`` (``A + Bt F`` Hurwitz) for the Newton iteration."""
    n, m = Bt.shape
    if is_hurwitz(A):
        return np.zeros((m, n))
    G = Bt @ Bt.T
    gammas = 2.0 ** np.arange(-10, 41)
    hit = next((k for k, g in enumerate(gammas) if is_hurwitz(A - g * G)), None)
    if hit is not None:
        if hit == 0:
            return -gammas[0] * Bt.T
        lo, hi = gammas[hit - 1], gammas[hit]
        for _ in range(40):
            mid = 0.5 * (lo + hi)
            if is_hurwitz(A - mid * G):
                hi = mid
            else:
                lo = mid
        g = 2.0 * hi if is_hurwitz(A - 2.0 * hi * G) else gammas[hit]
        return -g * Bt.T
    # Bass's construction for modes the B B^T shift cannot reach
    beta = np.linalg.norm(A, 2) + 1.0
    try:
        Z = solve_lyapunov(-(A + beta * np.eye(n)).T, 2.0 * G)
        F = -Bt.T @ np.linalg.pinv(Z)
        if is_hurwitz(A + Bt @ F):
            return F
    except (NotStable, np.linalg.LinAlgError):
        pass
    raise NotStabilizable("no stabilizing initial gain found")


def solve_care(agent, W_x, W_v, mu_c1, max_iter=MAX_NEWTON_ITER, tol=CARE_TOL):
    """Kleinman-Newton solution of the agent's Riccati equation.

    Returns
    -------
    P : ndarray
        Symmetric positive definite stabilizing solution.
    residual : float
        Frobenius norm of the Riccati left-hand side at ``P``.
    """
    A = agent.A
    B = agent.B_u
    W_x = _spd(W_x, "W_x")
    W_v = _spd(W_v, "W_v")
    mu = float(mu_c1)
    if not mu > 0:
        raise InvalidWeights(f"mu_c1 must be positive, got {mu}")
    Bt = mu * B
    if not _is_stabilizable(A, Bt):
        raise NotStabilizable("(A, B_u) is not stabilizable")
    F = _initial_gain(A, Bt)
    best = math.inf
    stall = 0
    P = None
    for _ in range(max_iter):
        Acl = A + Bt @ F
        try:
            P = solve_lyapunov(Acl, W_x + F.T @ W_v @ F)
        except NotStable as exc:
            raise ConvergenceFailure("Newton iterate lost stability") from exc
        F = -np.linalg.solve(W_v, Bt.T @ P)
        res = care_residual(A, B, W_x, W_v, mu, P)
        scale = max(1.0, np.linalg.norm(P)) ** 2
        if res <= 1e-14 * scale:
            break
        if res < best:
            best, stall = res, 0
        else:
            stall += 1
            if stall >= 5:
                break
    res = care_residual(A, B, W_x, W_v, mu, P)
    if not np.all(np.isfinite(P)) or res > tol:
        raise ConvergenceFailure(f"Riccati residual {res:.3e} above tolerance {tol:.1e}")
    if np.linalg.eigvalsh(P).min() <= PD_TOL:
        raise ConvergenceFailure("Riccati solution is not positive definite")
    return P, res


def compute_gain(P, W_v, B_u, mu_c1):
    """Distributed gain ``K = -mu_c1 W_v^{-1} B_u^T P``."""
    W_v = np.array(W_v, dtype=float, ndmin=2)
    B_u = np.array(B_u, dtype=float, ndmin=2)
    try:
        if np.linalg.eigvalsh(0.5 * (W_v + W_v.T)).min() <= PD_TOL:
            raise InvalidWeights("W_v must be positive definite")
        K = -mu_c1 * np.linalg.solve(W_v, B_u.T @ np.asarray(P, dtype=float))
    except np.linalg.LinAlgError as exc:
        raise InvalidWeights("W_v is singular") from exc
    if not np.any(B_u):
        warnings.warn("B_u is zero: agent is uncontrollable and its gain vanishes", stacklevel=2)
    return K


def synthesize(sys: MasSystem, weights: DesignWeights) -> GainSet:
    if len(weights.W_x) != sys.N:
        raise InvalidWeights(f"weights given for {len(weights.W_x)} agents, system has {sys.N}")
    H, mu, _ = build_hc(sys.control_graph)
    Ps, Ks, res = [], [], []
    for ag, Wx, Wv in zip(sys.agents, weights.W_x, weights.W_v):
        P, r = solve_care(ag, Wx, Wv, mu)
        Ps.append(P)
        Ks.append(compute_gain(P, Wv, ag.B_u, mu))
        res.append(r)
    return GainSet(tuple(Ps), tuple(Ks), tuple(res), mu, H)


def stacked(sys: MasSystem):
    """Block-diagonal A, B_u, B_f, C_z of the whole agent layer."""
    ag = sys.agents
    return (block_diag(*[a.A for a in ag]), block_diag(*[a.B_u for a in ag]),
            block_diag(*[a.B_f for a in ag]), block_diag(*[a.C_z for a in ag]))


def design_property_residuals(sys, gains, weights, n_samples=1000, seed=0):
    """Worst violation of the two exact identities implied by the Riccati design.

    For ``v = K x`` and ``V_x = 2 P x``::

        x^T W_x x + v^T W_v v + V_x^T (A x + mu B_u v) = 0
        2 W_v K + mu B_u^T (2 P) = 0

    Returns the first residual scaled by ``1 + ||x||^2`` (maximum over random
    states) and the spectral norm of the second.
    """
    A, B, _, _ = stacked(sys)
    P, K = gains.P_bar, gains.K_bar
    Wx, Wv = block_diag(*weights.W_x), block_diag(*weights.W_v)
    mu = gains.mu_c1
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n_samples, A.shape[0])) * rng.uniform(0.1, 10.0, (n_samples, 1))
    V = X @ K.T
    first = (np.einsum("ni,ij,nj->n", X, Wx, X) + np.einsum("ni,ij,nj->n", V, Wv, V)
             + 2 * np.einsum("ni,ij,nj->n", X, P, X @ A.T + mu * V @ B.T))
    scaled = np.abs(first) / (1 + np.einsum("ni,ni->n", X, X))
    second = np.linalg.norm(2 * Wv @ K + mu * B.T @ (2 * P), 2)
    return float(scaled.max()), float(second)


# -- validation matrix and rates -----------------------------------------------

def nonlinearity_weight(sys: MasSystem, qv_form="scalar"):
    """PSD matrix ``G`` with ``||f(z)||^2 <= x^T G x`` for the stacked state."""
    n_x = sys.n_x
    Aa = np.kron(sys.agent_graph.weights, np.eye(n_x))
    if qv_form == "scalar":
        D = np.kron(np.diag([a.gamma_f * a.gamma_cz for a in sys.agents]), np.eye(n_x))
        return Aa.T @ D @ Aa
    _, _, _, Cz = stacked(sys)
    G = np.kron(np.diag([a.gamma_f for a in sys.agents]), np.eye(sys.agents[0].n_z))
    M = Cz @ Aa
    return M.T @ G @ M


def build_validation_matrix(sys, gains, weights, kappa_2=0.0):
    """Assemble ``Q_v`` and test it for positive definiteness.

    ``kappa_2`` (the largest per-agent state weight of the trigger) is
    subtracted as ``(kappa_2 / a_e) I`` so that the Lyapunov decrease bound
    ``dV/dt <= -x^T (Q_v + kappa_2/a_e I) x + (1/a_e) sum ||e_v_i||^2`` is exact.

    Returns
    -------
    Q_v : ndarray
    qv_positive : bool
        ``lambda_min(Q_v) > 1e-10``; a ``False`` is a result, not an error.
    """
    N, n_u = sys.N, sys.n_u
    a_e, a_f = weights.a_e, weights.a_f
    _, _, Bf, _ = stacked(sys)
    P, K = gains.P_bar, gains.K_bar
    Wx, Wv = block_diag(*weights.W_x), block_diag(*weights.W_v)
    H, mu = gains.H_c, gains.mu_c1
    Ec = np.kron(H / mu - np.eye(N), np.eye(n_u))
    H2 = np.kron(H @ H / mu ** 2, np.eye(n_u))
    inner = Wv + (Wv @ Ec + Ec @ Wv) - a_e * Wv @ H2 @ Wv
    PBf = P @ Bf
    Q = (Wx - a_f * nonlinearity_weight(sys, weights.qv_form) - PBf @ PBf.T / a_f
         + K.T @ inner @ K - (kappa_2 / a_e) * np.eye(P.shape[0]))
    Q = 0.5 * (Q + Q.T)
    return Q, bool(np.linalg.eigvalsh(Q).min() > PD_TOL)


def zeno_gap_bound(sigma, kappa_1, b_4):
    """Closed-form inter-event lower bound ``(2/sigma) ln(1 + sigma sqrt(kappa_1) / (2 b_4))``."""
    if b_4 == 0:
        return math.inf
    return 2.0 / sigma * math.log1p(sigma * math.sqrt(kappa_1) / (2.0 * b_4))


@dataclass(frozen=True, eq=False)
class CertificateReport:
    """Everything the certifier needs, computed once per scenario."""

    Q_v_bar: np.ndarray
    lambda_min_Qv: float
    qv_positive: bool
    lambda_min_P: float
    lambda_max_P: float
    kappa_1: np.ndarray
    kappa_2: float
    sigma: float
    a_e: float
    t_dos: float
    rho_v: float
    rho_dos: float
    tau_star: float
    pi_star: float
    b_dos: float
    b_1: float
    b_2: float
    b_3: np.ndarray
    b_4: np.ndarray
    gain_norms: np.ndarray
    condition15_lower: float
    condition15_upper: float
    condition15_holds: bool
    zeno_bounds: np.ndarray = field(default=None)

    def to_dict(self):
        out = {}
        for k in ("lambda_min_Qv", "qv_positive", "lambda_min_P", "lambda_max_P",
                  "kappa_2", "sigma", "a_e", "t_dos", "rho_v", "rho_dos", "tau_star",
                  "pi_star", "b_dos", "b_1", "b_2", "condition15_lower",
                  "condition15_upper", "condition15_holds"):
            out[k] = getattr(self, k)
        for k in ("kappa_1", "b_3", "b_4", "zeno_bounds"):
            out[k] = [float(v) for v in getattr(self, k)]
        return out


def compute_rates(sys, gains, weights, Q_v, trigger, dos_params, x0):
    """Populate a :class:`CertificateReport` from the synthesized design.

    ``dos_params`` may be ``None`` for a system with no declared attack
    budget; then ``1/tau_star = 0`` and the DoS condition cannot hold.

    Raises
    ------
    InvalidSigma
        If ``rho_v <= sigma`` (the convergence envelopes are undefined).
    """
    a_e = weights.a_e
    kappa_1 = np.asarray(trigger.kappa_1, dtype=float)
    kappa_2 = float(np.max(trigger.kappa_2))
    sigma, t_dos = float(trigger.sigma), float(trigger.t_dos)
    P = gains.P_bar
    eigP = np.linalg.eigvalsh(P)
    lmin_P, lmax_P = float(eigP.min()), float(eigP.max())
    lmin_Q = float(np.linalg.eigvalsh(Q_v).min())
    rho_v = lmin_Q / lmax_P
    if not rho_v > sigma:
        raise InvalidSigma(f"sigma={sigma} must be below rho_v={rho_v:.6g}")
    kk = max(float(np.linalg.eigvalsh(K.T @ K).max()) for K in gains.K)
    rho_dos = 4.0 * kk / (a_e * lmin_P)

    if dos_params is None:
        inv_tau_star, pi_star = 0.0, 0.0
    else:
        inv_tau_star = 1.0 / dos_params.tau_d + t_dos / dos_params.tau_f
        pi_star = dos_params.pi_d + dos_params.pi_f * t_dos
    tau_star = math.inf if inv_tau_star == 0 else 1.0 / inv_tau_star
    b_dos = math.exp((rho_v + rho_dos) * pi_star)
    lower = (rho_v - sigma) / (rho_v + rho_dos)
    upper = rho_v / (rho_v + rho_dos)
    holds = bool(lower < inv_tau_star < upper)

    x0 = np.asarray(x0, dtype=float).reshape(-1)
    b_2 = float(kappa_1.sum()) / (a_e * (rho_v - sigma))
    b_1 = lmax_P / lmin_P * float(x0 @ x0) + b_2 / lmin_P

    N = sys.N
    b_3 = np.empty(N)
    for i, K in enumerate(gains.K):
        ev = np.linalg.eigvalsh(K.T @ K)
        ok = ev.min() > 1e-12 * max(ev.max(), 1e-300)
        b_3[i] = (kappa_1[i] + b_1 * trigger.kappa_2[i]) / ev.min() if ok else math.inf
    Lc = build_laplacian(sys.control_graph)
    Wc, s = sys.control_graph.weights, sys.control_graph.pinning
    Aa_norm = float(np.linalg.norm(sys.agent_graph.weights, 2))
    b_4 = np.empty(N)
    for i, ag in enumerate(sys.agents):
        d = Lc[i, i] + s[i]
        BK = [float(np.linalg.norm(ag.B_u @ Kj, 2)) for Kj in gains.K]
        A_e = ag.A + d * ag.B_u @ gains.K[i]
        nbr = [j for j in range(N) if Wc[i, j] > 0]
        state = (np.linalg.norm(A_e, 2) + sum(Wc[i, j] * BK[j] for j in nbr)
                 + np.linalg.norm(ag.B_f, 2) * Aa_norm * math.sqrt(ag.gamma_f * ag.gamma_cz))
        if not np.all(np.isfinite(b_3[[i] + nbr])):
            b_4[i] = math.inf
            continue
        err = sum(Wc[i, j] * BK[j] * math.sqrt(b_3[j]) for j in nbr) + d * BK[i] * math.sqrt(b_3[i])
        b_4[i] = state * math.sqrt(b_1) + err
    gain_norms = np.array([float(np.linalg.norm(K, 2)) for K in gains.K])
    zeno = np.array([
        zeno_gap_bound(sigma, kappa_1[i], b_4[i] * max(1.0, gain_norms[i]))
        if math.isfinite(b_4[i]) else math.nan for i in range(N)])

    return CertificateReport(
        Q_v_bar=Q_v, lambda_min_Qv=lmin_Q, qv_positive=lmin_Q > PD_TOL,
        lambda_min_P=lmin_P, lambda_max_P=lmax_P, kappa_1=kappa_1, kappa_2=kappa_2, sigma=sigma,
        a_e=a_e, t_dos=t_dos, rho_v=rho_v, rho_dos=rho_dos, tau_star=tau_star,
        pi_star=pi_star, b_dos=b_dos, b_1=b_1, b_2=b_2, b_3=b_3, b_4=b_4,
        gain_norms=gain_norms, condition15_lower=lower, condition15_upper=upper,
        condition15_holds=holds, zeno_bounds=zeno)
