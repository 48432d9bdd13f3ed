"""Scenario files: a YAML document with schema ``etds-scenario/1``.

A minimal document::

    schema: etds-scenario/1
    agents:
      - {A: [[0.0]], B_u: [[1.0]]}
    trigger: {kappa_1: 0.1, kappa_2: 0.1, sigma: 1.0, t_dos: 0.1}
    simulation: {x0: [[1.0]], t_end: 10.0, dt: 0.001}

Unknown keys are rejected.  Every violation is reported as a
:class:`~etds.errors.ValidationError` naming the dotted field path and the
source line.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import yaml

from .dos import DoSParams, DoSSchedule, generate_schedule
from .errors import EtdsError, ParseError, ValidationError
from .model import AgentDynamics, LayerGraph, MasSystem, Nonlinearity, build_hc
from .simulator import Scenario
from .synthesis import DesignWeights
from .trigger import TriggerParams

SCHEMA = "etds-scenario/1"

_TOP = {"schema", "id", "agents", "agent_graph", "control_graph", "design", "trigger", "dos", "simulation"}
_AGENT = {"A", "B_u", "B_f", "C_z", "nonlinearity", "gamma_f", "gamma_cz"}
_GRAPH = {"weights", "edges", "pinning"}
_DESIGN = {"W_x", "W_v", "a_e", "a_f", "qv_form"}
_TRIGGER = {"kappa_1", "kappa_2", "sigma", "t_dos"}
_DOS = {"params", "attacks", "generate"}
_DOS_PARAMS = {"pi_f", "tau_f", "pi_d", "tau_d"}
_GENERATE = {"intensity", "seed", "quantum"}
_SIM = {"x0", "t_end", "dt"}

DEFAULT_T_END = 10.0
DEFAULT_A_E = 0.5
DEFAULT_A_F = 1.0


# -- source positions --------------------------------------------------------

def _index_lines(node, path, lines):
    lines[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        seen = set()
        for k, v in node.value:
            key = k.value
            if key in seen:
                raise ValidationError(_dotted(path + (key,)), "duplicate key", k.start_mark.line + 1)
            seen.add(key)
            _index_lines(v, path + (key,), lines)
    elif isinstance(node, yaml.SequenceNode):
        for n, v in enumerate(node.value):
            _index_lines(v, path + (n,), lines)


def _dotted(path):
    out = ""
    for p in path:
        out += f"[{p}]" if isinstance(p, int) else (f".{p}" if out else str(p))
    return out or "<document>"


class _Doc:
    """Parsed document plus a path-to-line index for diagnostics."""

    def __init__(self, lines):
        self.lines = lines

    def fail(self, path, message):
        line = None
        p = tuple(path)
        while line is None and p:
            line = self.lines.get(p)
            p = p[:-1]
        raise ValidationError(_dotted(path), message, line or self.lines.get(()))

    def mapping(self, v, path, allowed, required=()):
        if v is None:
            v = {}
        if not isinstance(v, dict):
            self.fail(path, "expected a mapping")
        for k in v:
            if k not in allowed:
                self.fail(tuple(path) + (k,), f"unknown key; allowed keys are {', '.join(sorted(allowed))}")
        for k in required:
            if k not in v:
                self.fail(path, f"missing required key {k!r}")
        return v

    def num(self, v, path):
        if isinstance(v, bool) or v is None:
            self.fail(path, "expected a number")
        if isinstance(v, str):
            try:
                v = float(v)
            except ValueError:
                self.fail(path, f"expected a number, got {v!r}")
        if not isinstance(v, (int, float)):
            self.fail(path, "expected a number")
        v = float(v)
        if math.isnan(v):
            self.fail(path, "must not be NaN")
        return v

    def positive(self, v, path, strict=True):
        x = self.num(v, path)
        if (x <= 0 if strict else x < 0) or not math.isfinite(x):
            self.fail(path, "must be > 0" if strict else "must be >= 0")
        return x

    def vector(self, v, path):
        if not isinstance(v, list):
            return np.array([self.num(v, path)])
        return np.array([self.num(e, tuple(path) + (n,)) for n, e in enumerate(v)])

    def matrix(self, v, path):
        if not isinstance(v, list):
            return np.array([[self.num(v, path)]])
        if v and not isinstance(v[0], list):
            self.fail(path, "expected a list of rows")
        rows = []
        for r, row in enumerate(v):
            if not isinstance(row, list):
                self.fail(tuple(path) + (r,), "expected a row list")
            rows.append([self.num(e, tuple(path) + (r, c)) for c, e in enumerate(row)])
        if not rows or len({len(r) for r in rows}) != 1 or not rows[0]:
            self.fail(path, "rows must be non-empty and of equal length")
        return np.array(rows)

    def per_agent(self, v, path, N, conv, depth):
        """A value shared by all agents, or a list with one entry per agent.

        ``depth`` is the list nesting of one entry (0 for scalars, 2 for matrices).
        """
        if _depth(v) == depth + 1:
            if len(v) != N:
                self.fail(path, f"needs one entry per agent ({N}), got {len(v)}")
            return [conv(e, tuple(path) + (n,)) for n, e in enumerate(v)], True
        return [conv(v, path)] * N, False


def _depth(v):
    if not isinstance(v, list):
        return 0
    return 1 + (_depth(v[0]) if v else 0)


# -- loading -------------------------------------------------------------------

def parse_document(text):
    """YAML text -> ``(data, doc)`` with a line index; raises :class:`ParseError`."""
    try:
        loader = yaml.SafeLoader(text)
        try:
            node = loader.get_single_node()
            if node is None:
                raise ParseError("empty scenario document")
            lines = {}
            _index_lines(node, (), lines)
            data = loader.construct_document(node)
        finally:
            loader.dispose()
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" (line {mark.line + 1})" if mark is not None else ""
        raise ParseError(f"malformed scenario document{where}: {getattr(exc, 'problem', exc)}") from None
    return data, _Doc(lines)


def _wrap(doc, path, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except ValidationError:
        raise
    except (EtdsError, ValueError) as exc:
        doc.fail(path, str(exc))


def _agent(doc, v, path):
    v = doc.mapping(v, path, _AGENT, ("A", "B_u"))
    kw = {"A": doc.matrix(v["A"], path + ("A",)), "B_u": doc.matrix(v["B_u"], path + ("B_u",))}
    for k in ("B_f", "C_z"):
        if k in v:
            kw[k] = doc.matrix(v[k], path + (k,))
    for k in ("gamma_f", "gamma_cz"):
        if k in v and v[k] is not None:
            kw[k] = doc.positive(v[k], path + (k,), strict=False)
    if "nonlinearity" in v:
        nl = v["nonlinearity"]
        p = path + ("nonlinearity",)
        if isinstance(nl, str):
            nl = {"name": nl}
        if not isinstance(nl, dict) or "name" not in nl:
            doc.fail(p, "expected a mapping with a 'name' key")
        params = {k: doc.num(x, p + (k,)) for k, x in nl.items() if k != "name"}
        kw["nonlinearity"] = _wrap(doc, p, Nonlinearity.from_spec, str(nl["name"]), **params)
    return _wrap(doc, path, AgentDynamics, **kw)


def _graph(doc, v, path, N, pinned):
    v = doc.mapping(v, path, _GRAPH if pinned else _GRAPH - {"pinning"})
    if "weights" in v and "edges" in v:
        doc.fail(path, "give either 'weights' or 'edges', not both")
    if "weights" in v:
        W = doc.matrix(v["weights"], path + ("weights",))
        if W.shape != (N, N):
            doc.fail(path + ("weights",), f"must be {N} x {N}, got {W.shape[0]} x {W.shape[1]}")
    else:
        W = np.zeros((N, N))
        for n, e in enumerate(v.get("edges") or []):
            p = path + ("edges", n)
            if not isinstance(e, list) or len(e) not in (2, 3):
                doc.fail(p, "an edge is [i, j] or [i, j, weight]")
            i, j = (int(doc.num(x, p)) for x in e[:2])
            if not (0 <= i < N and 0 <= j < N) or i == j:
                doc.fail(p, f"edge endpoints must be distinct agent indices in 0..{N - 1}")
            W[i, j] = W[j, i] = doc.positive(e[2], p + (2,), strict=False) if len(e) == 3 else 1.0
    s = None
    if pinned:
        s = np.ones(N)
        if "pinning" in v:
            s = doc.vector(v["pinning"], path + ("pinning",))
            if s.shape == (1,) and N > 1:
                s = np.full(N, s[0])
            if s.shape != (N,):
                doc.fail(path + ("pinning",), f"needs {N} entries")
    return _wrap(doc, path, LayerGraph, W, s)


def build_scenario(data, doc, seed=None, dt=None, no_dos=False) -> Scenario:
    """Validate a parsed document and assemble the :class:`Scenario`."""
    data = doc.mapping(data, (), _TOP, ("schema", "agents", "trigger", "simulation"))
    if data["schema"] != SCHEMA:
        doc.fail(("schema",), f"unsupported schema {data['schema']!r}; expected {SCHEMA!r}")
    sid = str(data.get("id", "scenario"))

    agents_v = data["agents"]
    if not isinstance(agents_v, list) or not agents_v:
        doc.fail(("agents",), "expected a non-empty list of agents")
    agents = [_agent(doc, a, ("agents", n)) for n, a in enumerate(agents_v)]
    N = len(agents)

    ag_graph = _graph(doc, data.get("agent_graph"), ("agent_graph",), N, pinned=False)
    c_graph = _graph(doc, data.get("control_graph"), ("control_graph",), N, pinned=True)
    sys = _wrap(doc, ("agents",), MasSystem, tuple(agents), ag_graph, c_graph)
    _wrap(doc, ("control_graph",), build_hc, c_graph)

    d = doc.mapping(data.get("design"), ("design",), _DESIGN)
    W_x = doc.per_agent(d["W_x"], ("design", "W_x"), N, doc.matrix, 2)[0] if "W_x" in d else [np.eye(sys.n_x)] * N
    W_v = doc.per_agent(d["W_v"], ("design", "W_v"), N, doc.matrix, 2)[0] if "W_v" in d else [np.eye(sys.n_u)] * N
    a_e = doc.positive(d.get("a_e", DEFAULT_A_E), ("design", "a_e"))
    a_f = doc.positive(d.get("a_f", DEFAULT_A_F), ("design", "a_f"))
    weights = _wrap(doc, ("design",), DesignWeights, tuple(W_x), tuple(W_v), a_e, a_f,
                    str(d.get("qv_form", "scalar")))
    for name, Ws, n in (("W_x", W_x, sys.n_x), ("W_v", W_v, sys.n_u)):
        for k, w in enumerate(Ws):
            if w.shape != (n, n):
                doc.fail(("design", name), f"agent {k} needs a {n} x {n} matrix")

    t = doc.mapping(data["trigger"], ("trigger",), _TRIGGER, tuple(_TRIGGER))
    kappas = {}
    for name in ("kappa_1", "kappa_2"):
        ks, listed = doc.per_agent(t[name], ("trigger", name), N, doc.num, 0)
        for k, val in enumerate(ks):
            if not (val > 0 and math.isfinite(val)):
                doc.fail(("trigger", name, k) if listed else ("trigger", name),
                         f"must be strictly positive, got {val:g}")
        kappas[name] = ks
    k1, k2 = kappas["kappa_1"], kappas["kappa_2"]
    sigma = doc.positive(t["sigma"], ("trigger", "sigma"))
    t_dos = doc.positive(t["t_dos"], ("trigger", "t_dos"))
    trigger = _wrap(doc, ("trigger",), TriggerParams, k1, k2, sigma, t_dos)

    s = doc.mapping(data["simulation"], ("simulation",), _SIM, ("x0",))
    t_end = doc.positive(s.get("t_end", DEFAULT_T_END), ("simulation", "t_end"))
    step = dt if dt is not None else s.get("dt", t_dos / 20)
    step = doc.positive(step, ("simulation", "dt"))
    x0v = s["x0"]
    x0 = np.concatenate([doc.vector(r, ("simulation", "x0", n)) for n, r in enumerate(x0v)]) \
        if isinstance(x0v, list) and x0v and isinstance(x0v[0], list) else doc.vector(x0v, ("simulation", "x0"))
    if x0.size != N * sys.n_x:
        doc.fail(("simulation", "x0"), f"needs {N} x {sys.n_x} entries, got {x0.size}")
    if not np.all(np.isfinite(x0)):
        doc.fail(("simulation", "x0"), "must be finite")

    schedule = _dos(doc, data.get("dos"), t_end, seed, no_dos)
    sc = Scenario(sys, weights, trigger, schedule, x0.reshape(N, sys.n_x), t_end, step, sid)
    _wrap(doc, ("simulation", "dt"), sc.validate_step)
    return sc


def _dos(doc, v, horizon, seed, no_dos):
    if v is None:
        if seed is not None:
            doc.fail(("dos", "generate"), "a seed was given but the scenario has no DoS generate block")
        return DoSSchedule((), None, horizon)
    v = doc.mapping(v, ("dos",), _DOS)
    params = None
    if "params" in v:
        p = doc.mapping(v["params"], ("dos", "params"), _DOS_PARAMS, tuple(_DOS_PARAMS))
        vals = {k: doc.num(p[k], ("dos", "params", k)) for k in _DOS_PARAMS}
        if not vals["tau_d"] > 1:
            doc.fail(("dos", "params", "tau_d"), f"the duration feature requires tau_d > 1, got {vals['tau_d']:g}")
        if vals["pi_d"] < 0:
            doc.fail(("dos", "params", "pi_d"), "the duration feature requires pi_d >= 0")
        if vals["pi_f"] < 0:
            doc.fail(("dos", "params", "pi_f"), "the frequency feature requires pi_f >= 0")
        if not vals["tau_f"] > 0:
            doc.fail(("dos", "params", "tau_f"), "the frequency feature requires tau_f > 0")
        params = _wrap(doc, ("dos", "params"), DoSParams, **vals)
    if "attacks" in v and "generate" in v:
        doc.fail(("dos",), "give either 'attacks' or 'generate', not both")
    if seed is not None and "generate" not in v:
        doc.fail(("dos", "generate"), "a seed was given but the scenario has no DoS generate block")
    attacks = ()
    if "generate" in v:
        g = doc.mapping(v["generate"], ("dos", "generate"), _GENERATE, ("intensity",))
        if params is None:
            doc.fail(("dos", "params"), "generating a schedule needs DoS params")
        intensity = doc.positive(g["intensity"], ("dos", "generate", "intensity"), strict=False)
        quantum = doc.positive(g.get("quantum", 1e-3), ("dos", "generate", "quantum"))
        use_seed = seed if seed is not None else g.get("seed", 0)
        if isinstance(use_seed, bool) or not isinstance(use_seed, int) or use_seed < 0:
            doc.fail(("dos", "generate", "seed"), "seed must be a nonnegative integer")
        if not no_dos:
            return _wrap(doc, ("dos", "generate"), generate_schedule, use_seed, params, horizon,
                         intensity, quantum)
    elif "attacks" in v:
        att = v["attacks"] or []
        if not isinstance(att, list):
            doc.fail(("dos", "attacks"), "expected a list of [onset, duration] pairs")
        pairs = []
        for n, a in enumerate(att):
            p = ("dos", "attacks", n)
            if not isinstance(a, list) or len(a) != 2:
                doc.fail(p, "an attack is [onset, duration]")
            pairs.append((doc.positive(a[0], p + (0,), strict=False), doc.positive(a[1], p + (1,), strict=False)))
        attacks = tuple(pairs)
    if no_dos:
        attacks = ()
    return _wrap(doc, ("dos", "attacks"), DoSSchedule, attacks, params, horizon)


def load_scenario(path, seed=None, dt=None, no_dos=False) -> Scenario:
    """Read and validate a scenario file.

    ``seed`` overrides the DoS generation seed, ``dt`` the integration step and
    ``no_dos`` strips the attack schedule (its parameters are kept).
    """
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ParseError(f"cannot read scenario file {path}: {exc.strerror}") from None
    data, doc = parse_document(text)
    return build_scenario(data, doc, seed=seed, dt=dt, no_dos=no_dos)


def loads_scenario(text, **kwargs) -> Scenario:
    data, doc = parse_document(text)
    return build_scenario(data, doc, **kwargs)


# -- writing -------------------------------------------------------------------

def _m(a):
    return np.asarray(a, dtype=float).tolist()


def to_document(sc: Scenario) -> dict:
    """Fully explicit document of a scenario (every default and the realized schedule)."""
    sys = sc.sys
    agents = []
    for a in sys.agents:
        nl = {"name": a.nonlinearity.name, **dict(a.nonlinearity.params)}
        agents.append({"A": _m(a.A), "B_u": _m(a.B_u), "B_f": _m(a.B_f), "C_z": _m(a.C_z),
                       "nonlinearity": nl, "gamma_f": float(a.gamma_f), "gamma_cz": float(a.gamma_cz)})
    doc = {
        "schema": SCHEMA,
        "id": sc.scenario_id,
        "agents": agents,
        "agent_graph": {"weights": _m(sys.agent_graph.weights)},
        "control_graph": {"weights": _m(sys.control_graph.weights),
                          "pinning": _m(sys.control_graph.pinning)},
        "design": {"W_x": [_m(w) for w in sc.weights.W_x], "W_v": [_m(w) for w in sc.weights.W_v],
                   "a_e": sc.weights.a_e, "a_f": sc.weights.a_f, "qv_form": sc.weights.qv_form},
        "trigger": {"kappa_1": _m(sc.trigger.kappa_1), "kappa_2": _m(sc.trigger.kappa_2),
                    "sigma": sc.trigger.sigma, "t_dos": sc.trigger.t_dos},
        "simulation": {"x0": _m(sc.x0), "t_end": sc.t_end, "dt": sc.dt},
    }
    p = sc.dos.params
    if p is not None or len(sc.dos):
        dos = {}
        if p is not None:
            dos["params"] = {"pi_f": p.pi_f, "tau_f": p.tau_f, "pi_d": p.pi_d, "tau_d": p.tau_d}
        dos["attacks"] = [[h, d] for h, d in sc.dos.attacks]
        doc["dos"] = dos
    return doc


class _Dumper(yaml.SafeDumper):
    pass


def _float(dumper, v):
    if math.isnan(v):
        s = ".nan"
    elif math.isinf(v):
        s = ".inf" if v > 0 else "-.inf"
    else:
        s = repr(v)
        # YAML 1.1 floats need a dot and a signed exponent
        if "e" in s:
            mant, exp = s.split("e")
            if "." not in mant:
                mant += ".0"
            if exp[0] not in "+-":
                exp = "+" + exp
            s = f"{mant}e{exp}"
        elif "." not in s:
            s += ".0"
    return dumper.represent_scalar("tag:yaml.org,2002:float", s)


def _list(dumper, v):
    flow = all(not isinstance(e, (list, dict)) for e in v)
    return dumper.represent_sequence("tag:yaml.org,2002:seq", v, flow_style=flow)


_Dumper.add_representer(float, _float)
_Dumper.add_representer(list, _list)


def dumps_scenario(sc: Scenario) -> str:
    return yaml.dump(to_document(sc), Dumper=_Dumper, sort_keys=False, default_flow_style=False)


def write_scenario(sc: Scenario, path):
    Path(path).write_text(dumps_scenario(sc))
