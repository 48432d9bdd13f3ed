"""End-to-end runs: synthesize, simulate, certify, write outputs; plus grid sweeps."""

from __future__ import annotations

import copy
import csv
import itertools
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import certify as cert
from .dos import verify_features
from .errors import (ConvergenceFailure, EtdsError, InfeasibleTopology, InvalidSigma, InvalidStep,
                     ModelError, NotStabilizable, NumericalFault, ScenarioError, ValidationError)
from .scenario import build_scenario, parse_document
from .simulator import Scenario, TrajectoryLog, simulate
from .synthesis import build_validation_matrix, compute_rates, synthesize

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CHECK_FAILED, EXIT_INPUT, EXIT_NUMERICAL = 0, 1, 2, 3
CONVERGED_RATIO = 1e-3

INPUT_ERRORS = (ScenarioError, NotStabilizable, ModelError, InfeasibleTopology, InvalidStep)
NUMERICAL_ERRORS = (ConvergenceFailure, NumericalFault)


@dataclass
class RunSummary:
    scenario_id: str
    qv_positive: bool
    condition15_holds: bool
    features_ok: bool
    cert: cert.CertResult
    min_gap: float
    zeno_bound: float
    final_norm: float
    x0_norm: float
    converged: bool
    diverged: bool
    claims_convergence: bool
    event_counts: list
    wall_time: float
    exit_code: int = EXIT_OK
    rates: dict = field(default_factory=dict)
    schedule: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "scenario_id": self.scenario_id,
            "exit_code": self.exit_code,
            "qv_positive": self.qv_positive,
            "condition15_holds": self.condition15_holds,
            "features_ok": self.features_ok,
            "all_hold": self.cert.all_hold,
            "checks": self.cert.to_dict()["checks"],
            "min_gap": self.min_gap,
            "zeno_bound": self.zeno_bound,
            "final_norm": self.final_norm,
            "x0_norm": self.x0_norm,
            "converged": self.converged,
            "diverged": self.diverged,
            "claims_convergence": self.claims_convergence,
            "event_counts": self.event_counts,
            "wall_time": self.wall_time,
            "rates": self.rates,
            "schedule": self.schedule,
        }


def _jsonable(v):
    """Numpy scalars/arrays to lists; non-finite floats to the strings ``inf``/``-inf``/``nan``."""
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, (np.integer, int)):
        return int(v)
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else str(v)
    return v


def _not_applicable(name, why):
    return cert.CheckResult(name, cert.NOT_APPLICABLE, detail=why)


def analyze(sc: Scenario):
    """Design and certificate constants of a scenario.

    Returns ``(gains, Q_v, report)`` where ``report`` is ``None`` when
    ``rho_v <= sigma`` (then only the decrease check is meaningful).
    """
    gains = synthesize(sc.sys, sc.weights)
    Q_v, _ = build_validation_matrix(sc.sys, gains, sc.weights, float(np.max(sc.trigger.kappa_2)))
    try:
        report = compute_rates(sc.sys, gains, sc.weights, Q_v, sc.trigger, sc.dos.params, sc.x0)
    except InvalidSigma as exc:
        log.warning("%s: %s", sc.scenario_id, exc)
        report = None
    return gains, Q_v, report


def execute(sc: Scenario):
    """Run one scenario; returns ``(summary, trajectory log)`` without writing files."""
    t0 = time.perf_counter()
    gains, Q_v, report = analyze(sc)
    features_ok = verify_features(sc.dos).ok if sc.dos.params is not None else not len(sc.dos)
    zb = math.nan
    if report is not None:
        finite = report.zeno_bounds[np.isfinite(report.zeno_bounds)]
        zb = float(finite.min()) if finite.size == sc.sys.N else math.nan
    traj = simulate(sc, gains, zeno_bound=zb if math.isfinite(zb) else None)

    if report is not None:
        result = cert.certify(traj, report, gains, features_ok)
    else:
        cert.lyapunov_trajectory(traj, gains.P_bar)
        why = "rho_v <= sigma, the certificate constants are undefined"
        result = cert.CertResult([
            cert.check_eq16(traj, gains.P_bar, gains.K_bar, Q_v, float(np.max(sc.trigger.kappa_2)),
                            sc.weights.a_e),
            _not_applicable("envelope_dosfree", why), _not_applicable("dos_growth", why),
            _not_applicable("dos_envelope", why), _not_applicable("zeno_min_gap", why)])

    qv_pos = bool(report.qv_positive) if report is not None else bool(np.linalg.eigvalsh(Q_v).min() > 0)
    c15 = bool(report.condition15_holds) if report is not None else False
    x0n = float(np.linalg.norm(sc.x0))
    fin = float(np.linalg.norm(traj.states[-1])) if not traj.diverged else math.inf
    claims = report is not None and qv_pos and (not len(sc.dos) or (c15 and features_ok))
    converged = not traj.diverged and fin <= CONVERGED_RATIO * x0n

    code = EXIT_OK
    if not result.all_hold or (traj.diverged and claims):
        code = EXIT_CHECK_FAILED
    p = sc.dos.params
    summary = RunSummary(
        scenario_id=sc.scenario_id, qv_positive=qv_pos, condition15_holds=c15, features_ok=features_ok,
        cert=result, min_gap=cert.min_observed_gap(traj), zeno_bound=zb, final_norm=fin, x0_norm=x0n,
        converged=converged, diverged=traj.diverged, claims_convergence=claims,
        event_counts=traj.event_counts(), wall_time=time.perf_counter() - t0, exit_code=code,
        rates=_rates(report),
        schedule={"params": None if p is None else {"pi_f": p.pi_f, "tau_f": p.tau_f,
                                                     "pi_d": p.pi_d, "tau_d": p.tau_d},
                  "attacks": [list(a) for a in sc.dos.attacks]},
    )
    return summary, traj


def _rates(report):
    if report is None:
        return {}
    d = report.to_dict()
    d.pop("Q_v_bar", None)
    return d


# -- outputs -------------------------------------------------------------------

def write_trajectory_csv(traj: TrajectoryLog, path):
    N, n_x, n_u = traj.N, traj.n_x, traj.n_u
    header = (["time"] + [f"x_{i + 1}_{j + 1}" for i in range(N) for j in range(n_x)]
              + [f"u_{i + 1}_{j + 1}" for i in range(N) for j in range(n_u)] + ["V"])
    V = traj.lyapunov if traj.lyapunov is not None else np.full(len(traj.times), np.nan)
    data = np.column_stack([traj.times, traj.states, traj.controls, V])
    np.savetxt(path, data, fmt="%.17g", delimiter=",", header=",".join(header), comments="")


def write_events(traj: TrajectoryLog, path):
    with open(path, "w") as fh:
        for e in traj.events:
            fh.write(json.dumps(_jsonable(e.to_dict())) + "\n")


def write_summary(summary: RunSummary, path):
    Path(path).write_text(json.dumps(_jsonable(summary.to_dict()), indent=2) + "\n")


def _error_summary(sid, code, exc):
    return {"scenario_id": sid, "exit_code": code, "error": f"{type(exc).__name__}: {exc}"}


def run_document(data, doc, out_dir, seed=None, dt=None, no_dos=False):
    """Build, run and write one scenario; returns ``(exit code, summary dict)``.

    Errors are mapped onto exit codes and recorded in ``summary.json``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sid = str(data.get("id", "scenario")) if isinstance(data, dict) else "scenario"
    try:
        sc = build_scenario(copy.deepcopy(data), doc, seed=seed, dt=dt, no_dos=no_dos)
        sid = sc.scenario_id
        summary, traj = execute(sc)
    except INPUT_ERRORS as exc:
        d = _error_summary(sid, EXIT_INPUT, exc)
    except NUMERICAL_ERRORS as exc:
        d = _error_summary(sid, EXIT_NUMERICAL, exc)
    except EtdsError as exc:
        d = _error_summary(sid, EXIT_INPUT, exc)
    else:
        write_trajectory_csv(traj, out / "trajectory.csv")
        write_events(traj, out / "events.jsonl")
        write_summary(summary, out / "summary.json")
        return summary.exit_code, _jsonable(summary.to_dict())
    (out / "summary.json").write_text(json.dumps(_jsonable(d), indent=2) + "\n")
    return d["exit_code"], d


def run(path, out_dir, seed=None, dt=None, no_dos=False):
    """Run the scenario file at ``path``; returns the exit code."""
    try:
        data, doc = parse_document(Path(path).read_text())
    except OSError as exc:
        log.error("cannot read %s: %s", path, exc.strerror)
        return EXIT_INPUT
    except ScenarioError as exc:
        log.error("%s", exc)
        return EXIT_INPUT
    code, d = run_document(data, doc, out_dir, seed=seed, dt=dt, no_dos=no_dos)
    if "error" in d:
        log.error("%s", d["error"])
    return code


# -- sweeps --------------------------------------------------------------------

def set_path(data, dotted, value):
    """Assign ``value`` at a dotted path such as ``dos.params.tau_f`` or ``agents.0.A``."""
    parts = dotted.split(".")
    node = data
    for n, p in enumerate(parts[:-1]):
        key = int(p) if isinstance(node, list) else p
        if isinstance(node, dict) and key not in node:
            node[key] = {}
        try:
            node = node[key]
        except (IndexError, KeyError, TypeError):
            raise ValidationError(dotted, f"no such field at {'.'.join(parts[:n + 1])}") from None
    last = parts[-1]
    if isinstance(node, list):
        node[int(last)] = value
    elif isinstance(node, dict):
        node[last] = value
    else:
        raise ValidationError(dotted, "parent is not a mapping or list")


def load_grid(path):
    """Grid file ``{parameters: {dotted.path: [values, ...]}}`` -> ordered ``(names, values)``."""
    try:
        g = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ValidationError("grid", f"cannot read grid file {path}: {exc}") from None
    if not isinstance(g, dict) or set(g) != {"parameters"} or not isinstance(g["parameters"], dict):
        raise ValidationError("grid", "expected a single 'parameters' mapping of dotted paths to value lists")
    names, values = [], []
    for k, v in g["parameters"].items():
        if not isinstance(v, list) or not v:
            raise ValidationError(f"parameters.{k}", "expected a non-empty list of values")
        for x in v:
            if isinstance(x, float) and not math.isfinite(x):
                raise ValidationError(f"parameters.{k}", "grid values must be finite")
        names.append(str(k))
        values.append(v)
    return names, values


def _sweep_point(args):
    data, doc, out_dir, flags = args
    code, d = run_document(data, doc, out_dir, **flags)
    return code, d


def _sort_key(coords):
    return tuple((0, c, "") if isinstance(c, (int, float)) and not isinstance(c, bool) else (1, 0, str(c))
                 for c in coords)


AGGREGATE_FIELDS = ["exit_code", "qv_positive", "condition15_holds", "features_ok", "all_hold",
                    "converged", "final_norm", "min_gap", "zeno_bound", "error"]


def sweep(template, grid, out_dir, jobs=1, seed=None, dt=None, no_dos=False):
    """Run every point of a Cartesian parameter grid; returns ``(exit code, rows)``.

    Each point writes its outputs to ``out_dir/point_XXXX``; ``aggregate.csv``
    has one row per point sorted by grid coordinates.  A failing point is
    recorded with its exit code and error and does not stop the sweep.  The
    sweep's exit code is the largest point exit code.
    """
    data, doc = parse_document(Path(template).read_text())
    names, values = load_grid(grid)
    points = sorted(itertools.product(*values), key=_sort_key)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    flags = {"seed": seed, "dt": dt, "no_dos": no_dos}
    tasks = []
    for n, coords in enumerate(points):
        d = copy.deepcopy(data)
        for name, c in zip(names, coords):
            set_path(d, name, c)
        tasks.append((d, doc, out / f"point_{n:04d}", flags))
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_sweep_point, tasks))
    else:
        results = [_sweep_point(t) for t in tasks]

    rows = []
    for n, (coords, (code, d)) in enumerate(zip(points, results)):
        row = {"point": f"point_{n:04d}", **dict(zip(names, coords))}
        for k in AGGREGATE_FIELDS:
            row[k] = d.get(k, "")
        row["exit_code"] = code
        rows.append(row)
    with open(out / "aggregate.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["point"] + names + AGGREGATE_FIELDS)
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.17g}" if isinstance(v, float) else v) for k, v in row.items()})
    return (max(code for code, _ in results) if results else EXIT_OK), rows
