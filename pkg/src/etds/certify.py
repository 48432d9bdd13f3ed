"""Trajectory-level certification of the stability argument.

Every check compares logged samples with an analytic bound and records the
worst margin (bound minus observed, negative means violated) together with
where it occurred.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BoundUnavailable, InvalidSigma
from .synthesis import zeno_gap_bound

PASS, FAIL, NOT_APPLICABLE = "pass", "fail", "not_applicable"
REL_TOL = 1e-9
EQ16_ABS_TOL = 1e-8
EQ16_DT2_COEFF = 100.0


@dataclass
class CheckResult:
    name: str
    status: str
    worst_margin: float = math.inf
    worst_time: float = math.nan
    tolerance: float = 0.0
    detail: str = ""

    @property
    def holds(self) -> bool:
        return self.status != FAIL

    def to_dict(self):
        return {"name": self.name, "status": self.status, "holds": self.holds,
                "worst_margin": self.worst_margin, "worst_time": self.worst_time,
                "tolerance": self.tolerance, "detail": self.detail}


@dataclass
class CertResult:
    checks: list = field(default_factory=list)

    @property
    def all_hold(self) -> bool:
        return all(c.holds for c in self.checks)

    def __getitem__(self, name):
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self):
        return {"all_hold": self.all_hold, "checks": [c.to_dict() for c in self.checks]}


def _result(name, margins, times, tol):
    """Turn per-sample margins into a CheckResult; ``tol`` may be per sample."""
    if margins.size == 0:
        return CheckResult(name, PASS, detail="no samples to check")
    tol = np.broadcast_to(tol, margins.shape)
    k = int(np.argmin(margins + tol))
    status = PASS if margins[k] >= -tol[k] else FAIL
    return CheckResult(name, status, float(margins[k]), float(times[k]), float(tol[k]))


def lyapunov_trajectory(log, P_bar):
    """``V(t_k) = x(t_k)^T P x(t_k)`` at every sample; also stored on ``log.lyapunov``."""
    X = log.states
    V = np.einsum("ki,ij,kj->k", X, P_bar, X)
    log.lyapunov = V
    return V


def check_eq16(log, P_bar, K_bar, Q_v_bar, kappa_2, a_e, coeff=EQ16_DT2_COEFF):
    """Lyapunov decrease ``dV/dt <= -x^T (Q_v + kappa_2/a_e I) x + (1/a_e) ||e_v||^2``.

    The held input is constant on each step, so ``(V_{k+1} - V_k)/dt`` is the
    central difference of ``V`` at the step midpoint; it is compared with the
    trapezoidal mean of the right-hand side over the step, evaluated with the
    buffers of that step.  The allowance is ``coeff * dt^2 * scale + 1e-8``
    with ``scale`` the local magnitude of the bound's terms.
    """
    V = log.lyapunov if log.lyapunov is not None else lyapunov_trajectory(log, P_bar)
    X = log.states
    if len(X) < 2:
        return CheckResult("eq16_lyapunov_decrease", PASS, detail="trajectory too short")
    M = Q_v_bar + (kappa_2 / a_e) * np.eye(Q_v_bar.shape[0])
    dt = log.dt
    X0, X1 = X[:-1], X[1:]
    held = log.v_hats[:-1]
    e0 = held - X0 @ K_bar.T
    e1 = held - X1 @ K_bar.T
    q0 = np.einsum("ki,ij,kj->k", X0, M, X0)
    q1 = np.einsum("ki,ij,kj->k", X1, M, X1)
    n0 = np.einsum("ki,ki->k", e0, e0) / a_e
    n1 = np.einsum("ki,ki->k", e1, e1) / a_e
    rhs = 0.5 * ((-q0 + n0) + (-q1 + n1))
    lhs = np.diff(V) / dt
    Mn = np.linalg.norm(M, 2)
    scale = Mn * (np.einsum("ki,ki->k", X0, X0) + np.einsum("ki,ki->k", X1, X1)) + n0 + n1
    tol = coeff * dt ** 2 * scale + EQ16_ABS_TOL
    mid = log.times[:-1] + 0.5 * dt
    return _result("eq16_lyapunov_decrease", rhs - lhs, mid, tol)


def check_envelope_dosfree(log, report):
    """Exponential envelopes of the attack-free regime.

    Checks ``V(t) <= e^{-rho_v t} V(0) + b_2 (e^{-sigma t} - e^{-rho_v t})`` and
    ``||x_i(t)||^2 <= b_1 e^{-sigma t}`` (relative slack 1e-9) up to the first
    attack onset, or over the whole run if there is none.
    """
    sigma, rho = report.sigma, report.rho_v
    if not sigma < rho:
        raise InvalidSigma(f"sigma={sigma} must be below rho_v={rho}")
    t = log.times
    upto = len(t)
    if len(log.dos):
        upto = int(np.searchsorted(t, log.dos.onsets[0], side="left")) + 1
    t = t[:upto]
    X = log.agent_states()[:upto]
    V = log.lyapunov[:upto]
    env_V = np.exp(-rho * t) * V[0] + report.b_2 * (np.exp(-sigma * t) - np.exp(-rho * t))
    m_V = (env_V - V) / np.maximum(env_V, 1e-300)
    xi2 = np.einsum("kni,kni->kn", X, X).max(axis=1)
    env_x = report.b_1 * np.exp(-sigma * t)
    m_x = (env_x - xi2) / env_x
    res = _result("envelope_dosfree", np.minimum(m_V, m_x), t, REL_TOL)
    worst_V = _result("", m_V, t, REL_TOL)
    res.detail = (f"checked up to t={t[-1]:.6g}; worst relative margin on V {worst_V.worst_margin:.3e}; "
                  f"on ||x_i||^2 {float(m_x.min()):.3e}")
    return res


def dos_windows(log, t_dos):
    """``(n, h_n, end)`` of each blocked window ``[h_n, h_n + tau_n + t_dos)`` seen by the run."""
    out = []
    for n, (h, d) in enumerate(log.dos.attacks):
        if n in log.onset_states:
            out.append((n, h, h + d + t_dos))
    return out


def check_dos_growth(log, rho_dos, t_dos, P_bar):
    """Per-attack growth ``V(t) <= e^{rho_dos (t - h_n)} V(h_n)`` on each blocked window."""
    if log.lyapunov is None:
        lyapunov_trajectory(log, P_bar)
    wins = dos_windows(log, t_dos)
    if not wins:
        return CheckResult("dos_growth", PASS, detail="no attacks")
    t, V = log.times, log.lyapunov
    margins, when = [], []
    for n, h, end in wins:
        x_h = log.onset_states[n]
        V_h = float(x_h @ P_bar @ x_h)
        sel = (t >= h) & (t < end)
        bound = np.exp(rho_dos * (t[sel] - h)) * V_h
        margins.append((bound - V[sel]) / np.maximum(bound, 1e-300))
        when.append(t[sel])
    res = _result("dos_growth", np.concatenate(margins), np.concatenate(when), REL_TOL)
    res.detail = f"{len(wins)} blocked window(s)"
    return res


def dos_envelope(t, report, x0_sq, onsets):
    """Compound upper bound on ``||x(t)||^2`` under attacks with the given onsets."""
    rv, rd, inv_ts = report.rho_v, report.rho_dos, 1.0 / report.tau_star
    c = rv - (rv + rd) * inv_ts
    lam_min, lam_max = report.lambda_min_P, report.lambda_max_P
    t = np.asarray(t, dtype=float)
    h = np.asarray(onsets, dtype=float)
    w = np.exp(-(report.sigma - rv + (rv + rd) * inv_ts) * h)
    cum = np.concatenate([[0.0], np.cumsum(w)])
    per_t = cum[np.searchsorted(h, t, side="right")]
    decay = np.exp(-c * t)
    return (lam_max * report.b_dos * decay * x0_sq
            + report.b_2 * report.b_dos * per_t * decay
            + report.b_2 * np.exp(-report.sigma * t)) / lam_min


def check_dos_envelope(log, report, features_ok):
    """Compound exponential envelope on ``||x(t)||^2`` valid under the DoS condition."""
    name = "dos_envelope"
    if not report.condition15_holds:
        return CheckResult(name, NOT_APPLICABLE, detail="DoS condition on rho_v, rho_dos, tau_star fails")
    if not features_ok:
        return CheckResult(name, NOT_APPLICABLE, detail="schedule violates the declared attack features")
    X = log.states
    x0_sq = float(X[0] @ X[0])
    env = dos_envelope(log.times, report, x0_sq, log.dos.onsets)
    obs = np.einsum("ki,ki->k", X, X)
    res = _result(name, (env - obs) / env, log.times, REL_TOL)
    res.detail = f"{len(log.dos)} attack(s)"
    return res


def zeno_bound(i, report, gains=None):
    """Inter-event lower bound of agent ``i``.

    The error-rate constant ``b_4i`` is multiplied by ``max(1, ||K_i||)`` because
    the trigger measures ``||K_i e_i||`` rather than ``||e_i||``; for
    ``||K_i|| <= 1`` this is the plain closed form.

    Raises
    ------
    BoundUnavailable
        If ``K_i^T K_i`` is singular so the error envelope is undefined.
    """
    b4 = float(report.b_4[i])
    if not math.isfinite(b4):
        raise BoundUnavailable(f"agent {i}: K_i^T K_i is singular, no inter-event bound")
    norm = float(report.gain_norms[i]) if gains is None else float(np.linalg.norm(gains.K[i], 2))
    bound = zeno_gap_bound(report.sigma, float(report.kappa_1[i]), b4 * max(1.0, norm))
    assert bound > 0
    return bound


def observed_gaps(log, i):
    """Gaps between consecutive broadcasts of agent ``i`` before the first attack onset."""
    tb = log.broadcast_times(i)
    if len(log.dos):
        tb = tb[tb < log.dos.onsets[0]]
    return np.diff(tb)


def check_zeno(log, report, gains):
    """Observed attack-free inter-event gaps against the closed-form lower bound."""
    name = "zeno_min_gap"
    margins, when, notes = [], [], []
    for i in range(log.N):
        try:
            b = zeno_bound(i, report, gains)
        except BoundUnavailable as exc:
            return CheckResult(name, NOT_APPLICABLE, detail=str(exc))
        gaps = observed_gaps(log, i)
        if gaps.size:
            k = int(np.argmin(gaps))
            margins.append(gaps[k] - b)
            when.append(log.broadcast_times(i)[k + 1])
        notes.append(f"agent {i}: bound {b:.4g}, min gap {gaps.min() if gaps.size else math.inf:.4g}")
    if not margins:
        return CheckResult(name, PASS, detail="; ".join(notes) or "no gaps")
    res = _result(name, np.array(margins), np.array(when), 0.0)
    res.detail = "; ".join(notes)
    return res


def min_observed_gap(log):
    gaps = [observed_gaps(log, i) for i in range(log.N)]
    gaps = [g.min() for g in gaps if g.size]
    return float(min(gaps)) if gaps else math.inf


def ets_violation(log, K_bar, trigger):
    """Largest ``||e_v_i||^2 - (kappa_1i e^{-sigma t} + kappa_2i ||x_i||^2)`` on attack-free samples."""
    T = len(log.times)
    X = log.agent_states()
    E = (log.v_hats - log.states @ K_bar.T).reshape(T, log.N, log.n_u)
    thr = (trigger.kappa_1[None, :] * np.exp(-trigger.sigma * log.times)[:, None]
           + trigger.kappa_2[None, :] * np.einsum("kni,kni->kn", X, X))
    gap = np.einsum("kni,kni->kn", E, E) - thr
    upto = T if not len(log.dos) else int(np.searchsorted(log.times, log.dos.onsets[0], side="left"))
    return float(gap[:upto].max()) if upto else -math.inf


def certify(log, report, gains, features_ok=True):
    """Run all checks; envelopes become not-applicable when their premises fail."""
    P = gains.P_bar
    K = gains.K_bar
    lyapunov_trajectory(log, P)
    checks = [check_eq16(log, P, K, report.Q_v_bar, report.kappa_2, report.a_e)]
    checks.append(check_envelope_dosfree(log, report))
    checks.append(check_dos_growth(log, report.rho_dos, report.t_dos, P))
    checks.append(check_dos_envelope(log, report, features_ok))
    checks.append(check_zeno(log, report, gains))
    return CertResult(checks)
