"""DoS attack schedules: membership, interval accounting and the two attack features.

An attack ``n`` blocks ``H_n = {h_n} U [h_n, h_n + tau_n)`` network-wide.  A
class of attacks is described by a frequency feature
``n(tau, t) <= pi_f + (t - tau)/tau_f`` and a duration feature
``|Xi(tau, t)| <= pi_d + (t - tau)/tau_d`` over all windows ``t >= tau >= 0``.
"""

from __future__ import annotations

import math
from bisect import bisect_right
import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConstructionError, InvalidWindow

FEATURE_TOL = 1e-12


class DoSGenerationWarning(UserWarning):
    pass


@dataclass(frozen=True)
class DoSParams:
    pi_f: float
    tau_f: float
    pi_d: float
    tau_d: float

    def __post_init__(self):
        for k in ("pi_f", "tau_f", "pi_d", "tau_d"):
            v = float(getattr(self, k))
            if math.isnan(v):
                raise ConstructionError(f"{k} must be a number")
            object.__setattr__(self, k, v)
        if self.pi_f < 0:
            raise ConstructionError("pi_f must be >= 0 (frequency feature)")
        if not self.tau_f > 0:
            raise ConstructionError("tau_f must be > 0 (frequency feature)")
        if self.pi_d < 0:
            raise ConstructionError("pi_d must be >= 0 (duration feature)")
        if not self.tau_d > 1:
            raise ConstructionError("tau_d must be > 1 (duration feature requires tau_d > 1)")

    def star(self, t_dos):
        """``(pi_star, tau_star)`` of the effective blocked time including reconnection."""
        pi_star = self.pi_d + self.pi_f * t_dos
        inv = 1.0 / self.tau_d + t_dos / self.tau_f
        return pi_star, 1.0 / inv


@dataclass(frozen=True, eq=False)
class DoSSchedule:
    attacks: tuple = ()
    params: DoSParams | None = None
    horizon: float = 0.0

    def __post_init__(self):
        att = tuple((float(h), float(d)) for h, d in self.attacks)
        for k, (h, d) in enumerate(att):
            if not (math.isfinite(h) and math.isfinite(d)):
                raise ConstructionError(f"attack {k} must have finite onset and duration")
            if h < 0 or d < 0:
                raise ConstructionError(f"attack {k}: onset and duration must be >= 0")
            if k and h <= att[k - 1][0]:
                raise ConstructionError(f"attack {k}: onsets must be strictly increasing")
            if k and h < att[k - 1][0] + att[k - 1][1]:
                raise ConstructionError(f"attack {k} overlaps attack {k - 1}")
        object.__setattr__(self, "attacks", att)
        object.__setattr__(self, "horizon", float(self.horizon))
        object.__setattr__(self, "_h", np.array([a[0] for a in att], dtype=float))
        object.__setattr__(self, "_d", np.array([a[1] for a in att], dtype=float))
        object.__setattr__(self, "_h_list", [a[0] for a in att])

    def __eq__(self, other):
        if not isinstance(other, DoSSchedule):
            return NotImplemented
        return (self.attacks, self.params, self.horizon) == (other.attacks, other.params, other.horizon)

    def __len__(self):
        return len(self.attacks)

    @property
    def onsets(self):
        return self._h

    @property
    def durations(self):
        return self._d

    def without_attacks(self):
        return DoSSchedule((), self.params, self.horizon)

    def blocked_measure(self, t):
        """``|Xi(0, t)|`` for scalar or array ``t``."""
        t = np.asarray(t, dtype=float)
        if not len(self):
            return np.zeros_like(t)
        return np.clip(t[..., None] - self._h, 0.0, self._d).sum(axis=-1)

    def onset_count(self, tau, t):
        """Number of onsets ``h_n`` in ``[tau, t]`` (broadcasts over arrays)."""
        return (np.searchsorted(self._h, t, side="right")
                - np.searchsorted(self._h, tau, side="left"))


def is_active(s: DoSSchedule, t: float) -> bool:
    """Whether ``t`` lies in some ``H_n`` (half-open interval, onset included)."""
    k = bisect_right(s._h_list, t) - 1
    if k < 0:
        return False
    h, d = s.attacks[k]
    return t == h or t < h + d


class XiTheta(NamedTuple):
    xi_len: float
    theta_len: float
    n_count: int


def xi_theta(s: DoSSchedule, tau: float, t: float) -> XiTheta:
    """Blocked length, free length and onset count on the window ``[tau, t]``."""
    if t < tau:
        raise InvalidWindow(f"window end {t} precedes start {tau}")
    if tau < 0:
        raise InvalidWindow("windows start at tau >= 0")
    xi = 0.0
    for h, d in s.attacks:
        lo, hi = max(tau, h), min(t, h + d)
        if hi > lo:
            xi += hi - lo
    n = int(s.onset_count(tau, t))
    return XiTheta(xi, (t - tau) - xi, n)


class XiBar(NamedTuple):
    value: float
    bound: float


def xi_bar(s: DoSSchedule, t_dos: float, h_m: float, t: float) -> XiBar:
    """Effective blocked time ``|Xi| + n t_dos`` on ``[h_m, t]`` and its feature bound."""
    if s.params is None:
        raise ConstructionError("xi_bar needs declared DoS parameters")
    xi, _, n = xi_theta(s, h_m, t)
    pi_star, tau_star = s.params.star(t_dos)
    return XiBar(xi + n * t_dos, pi_star + (t - h_m) / tau_star)


@dataclass(frozen=True)
class FeatureReport:
    freq_ok: bool
    dur_ok: bool
    worst_freq: tuple
    worst_dur: tuple

    @property
    def ok(self):
        return self.freq_ok and self.dur_ok

    @property
    def failed(self):
        return [name for name, ok in (("frequency", self.freq_ok), ("duration", self.dur_ok)) if not ok]

    def to_dict(self):
        return {"freq_ok": self.freq_ok, "dur_ok": self.dur_ok,
                "worst_freq": list(self.worst_freq), "worst_dur": list(self.worst_dur)}


def critical_times(s: DoSSchedule):
    pts = [0.0, s.horizon]
    for h, d in s.attacks:
        pts += [h, h + d]
    return np.unique(np.array(pts))


def verify_features(s: DoSSchedule, grid_resolution=None, params=None) -> FeatureReport:
    """Check both features over every window with endpoints in the breakpoint set.

    Both ``n(tau, t)`` and ``|Xi(tau, t)|`` are piecewise linear (or constant)
    between ``{0, h_n, h_n + tau_n, horizon}``, so these windows contain the
    worst case.  ``grid_resolution`` adds a uniform grid of extra endpoints for
    cross-checking.  Each ``worst_*`` entry is ``(tau, t, excess)`` where a
    positive excess is a violation.
    """
    p = params or s.params
    if p is None:
        raise ConstructionError("verify_features needs DoS parameters")
    pts = critical_times(s)
    if grid_resolution:
        end = max(s.horizon, pts.max())
        pts = np.unique(np.concatenate([pts, np.arange(0.0, end + grid_resolution, grid_resolution)]))
    T, Tt = np.meshgrid(pts, pts, indexing="ij")
    mask = Tt >= T
    tau, t = T[mask], Tt[mask]
    n = s.onset_count(tau, t)
    xi = s.blocked_measure(t) - s.blocked_measure(tau)
    ex_f = n - p.pi_f - (t - tau) / p.tau_f
    ex_d = xi - p.pi_d - (t - tau) / p.tau_d
    kf, kd = int(np.argmax(ex_f)), int(np.argmax(ex_d))
    return FeatureReport(
        freq_ok=bool(ex_f[kf] <= FEATURE_TOL),
        dur_ok=bool(ex_d[kd] <= FEATURE_TOL),
        worst_freq=(float(tau[kf]), float(t[kf]), float(ex_f[kf])),
        worst_dur=(float(tau[kd]), float(t[kd]), float(ex_d[kd])),
    )


def generate_schedule(seed, params: DoSParams, horizon, intensity, quantum=1e-3) -> DoSSchedule:
    """Draw a feature-compliant schedule from a seeded stream.

    Inter-onset gaps are exponential with mean ``tau_f / intensity`` and
    durations uniform up to ``intensity`` times the longest single attack the
    duration feature admits.  Candidates that break either feature are
    shortened, then dropped.  Onsets and durations are multiples of
    ``quantum``.  ``intensity <= 0`` yields no attacks; a warning is issued
    when candidates were drawn but none fits.
    """
    horizon = float(horizon)
    empty = DoSSchedule((), params, horizon)
    if intensity <= 0:
        return empty
    rng = np.random.default_rng(seed)
    d_max = params.pi_d * params.tau_d / (params.tau_d - 1.0)

    digits = max(0, -math.floor(math.log10(quantum))) + 3

    def q(v):
        return round(round(v / quantum) * quantum, digits)

    attacks = []
    rejected = 0
    t = 0.0
    while True:
        t = q(t + max(quantum, rng.exponential(params.tau_f / intensity)))
        if t >= horizon:
            break
        d = q(min(rng.uniform(0.0, 1.0) * intensity * d_max, horizon))
        for cand in (d, q(d / 2), q(d / 4), 0.0):
            trial = DoSSchedule(tuple(attacks) + ((t, cand),), params, horizon)
            if verify_features(trial).ok:
                attacks.append((t, cand))
                t = q(t + cand)
                break
        else:
            rejected += 1
    if not attacks and rejected:
        warnings.warn(f"no attack fits the features at intensity {intensity}",
                      DoSGenerationWarning, stacklevel=2)
        return empty
    return DoSSchedule(tuple(attacks), params, horizon)
