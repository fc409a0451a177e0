"""Seeded intrusion scenarios shared by the adversary and acceptance tests."""

from __future__ import annotations

import numpy as np

from printguard.adversary import IntrusionPlan, ScenarioScript, Strategy, UserAction, run_intrusion
from printguard.attacks import AttackSpec
from printguard.gcode import serialize_program
from printguard.parts import PartProfile, generate_part
from printguard.server import PrintServer

NAME = "part.gcode"


def part_bytes(layers: int = 25, width: float = 20.0) -> bytes:
    return serialize_program(generate_part(PartProfile(width=width, depth=width, layers=layers))).encode()


def script(data: bytes, start: float, upload: float = 0.0, extra=(), horizon=None) -> ScenarioScript:
    actions = [UserAction(upload, "upload", NAME, data), UserAction(start, "start", NAME), *extra]
    return ScenarioScript(actions, horizon)


def seeded_case(strategy: Strategy, seed: int, data: bytes):
    """Plan and script drawn from ``seed``; start times span both sides of each race."""
    rng = np.random.default_rng(seed)
    kind = ["under_extrusion", "over_extrusion", "noise_injection", "dimensional_change"][seed % 4]
    attack = AttackSpec.default(kind, seed=int(rng.integers(1 << 30)))
    if strategy is Strategy.DEFERRED:
        plan = IntrusionPlan(strategy, attack, delay=float(rng.uniform(1, 6)), seed=seed)
        start = float(rng.uniform(2, 60))
    elif strategy is Strategy.ACCESS_JAM:
        plan = IntrusionPlan(strategy, attack, lock_duration=float(rng.uniform(5, 10)), seed=seed)
        start = float(rng.uniform(0.5, 15))
    else:
        plan = IntrusionPlan(strategy, attack, trigger_delay=float(rng.uniform(120, 240)), seed=seed)
        start = float(rng.uniform(0, 30))
    return plan, script(data, start)


def run(plan: IntrusionPlan, scr: ScenarioScript):
    server = PrintServer()
    transcript = run_intrusion(server, plan, scr)
    return server, transcript
