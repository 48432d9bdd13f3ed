from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from etds.dos import DoSParams, DoSSchedule
from etds.model import AgentDynamics, LayerGraph, MasSystem
from etds.simulator import Scenario
from etds.synthesis import DesignWeights
from etds.trigger import TriggerParams

CORPUS = Path(__file__).resolve().parents[1] / "scenarios"


def scalar_system(A=0.0, B=1.0, pin=1.0):
    ag = AgentDynamics([[A]], [[B]])
    return MasSystem((ag,), LayerGraph.empty(1), LayerGraph.empty(1, [pin]))


def scalar_scenario(A=0.0, attacks=(), params=DoSParams(1.0, 5.0, 0.5, 10.0), a_e=0.5,
                    kappa_1=0.1, kappa_2=0.1, sigma=1.0, t_dos=0.1, x0=1.0, t_end=5.0, dt=1e-3):
    sys = scalar_system(A)
    return Scenario(sys, DesignWeights.identity(sys, a_e, 1.0),
                    TriggerParams([kappa_1], [kappa_2], sigma, t_dos),
                    DoSSchedule(attacks, params, t_end), [[x0]], t_end, dt, "scalar")


def corpus_files():
    return sorted(p for p in CORPUS.glob("*.yaml") if not p.name.startswith("sweep"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(lines, key=lambda k: (int(k.rstrip("ab")), k)):
        terminalreporter.write_line(lines[n])
