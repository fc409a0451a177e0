"""MitM intrusion strategies against the virtual print server.

The scripted user and the adversary are interleaved by a discrete-event
scheduler on the server's simulated clock.  At equal timestamps the user
acts first, so a race the attacker ties is a race the attacker loses.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable

from .attacks import AttackSpec, Region, apply_attack
from .gcode import parse_program, serialize_program
from .server import AccessDenied, Event, PrintServer, ServerError, StateError

USER_FIRST, ATTACKER = 0, 1
PREEMPT = -1  # attacker reactions that land before anything else at the same instant


class Strategy(str, Enum):
    DEFERRED = "deferred"
    ACCESS_JAM = "access_jam"
    EXECUTION_PHASE = "execution_phase"


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class IntrusionPlan:
    strategy: Strategy
    attack: AttackSpec
    delay: float = 3.0  # deferred: wait after upload detection
    lock_duration: float = 7.0  # access jam: seconds, allowed range 5-10
    trigger_delay: float = 120.0  # execution phase: seconds after print start, 120-300
    seed: int = 0
    latency_per_10k_lines: float = 0.5
    whole_file: bool = False
    override: bool = False

    def __post_init__(self):
        if self.delay < 0:
            raise PlanError("delay must be >= 0")
        if self.override:
            return
        if self.strategy is Strategy.ACCESS_JAM and not 5.0 <= self.lock_duration <= 10.0:
            raise PlanError("lock duration must lie in [5, 10] s (set override to bypass)")
        if self.strategy is Strategy.EXECUTION_PHASE and not 120.0 <= self.trigger_delay <= 300.0:
            raise PlanError("trigger delay must lie in [120, 300] s (set override to bypass)")

    def latency(self, n_lines: int) -> float:
        return self.latency_per_10k_lines * n_lines / 10_000

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy.value,
            "attack": self.attack.to_dict(),
            "delay": self.delay,
            "lock_duration": self.lock_duration,
            "trigger_delay": self.trigger_delay,
            "seed": self.seed,
            "latency_per_10k_lines": self.latency_per_10k_lines,
            "whole_file": self.whole_file,
            "override": self.override,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "IntrusionPlan":
        data = dict(data)
        data["strategy"] = Strategy(data["strategy"])
        data["attack"] = AttackSpec.from_dict(data["attack"])
        return cls(**data)


@dataclass(frozen=True)
class UserAction:
    t: float
    action: str  # upload | start | read | pause | resume | cancel
    name: str = ""
    data: bytes | None = None


@dataclass
class ScenarioScript:
    actions: list[UserAction]
    horizon: float | None = None

    @classmethod
    def from_dict(cls, data: dict, base: Path | None = None) -> "ScenarioScript":
        actions = []
        for item in data["actions"]:
            payload = None
            if "file" in item:
                path = Path(item["file"])
                if base is not None and not path.is_absolute():
                    path = base / path
                payload = path.read_bytes()
            elif "text" in item:
                payload = item["text"].encode()
            actions.append(UserAction(float(item["t"]), item["action"], item.get("name", ""), payload))
        return cls(actions, data.get("horizon"))


@dataclass
class Transcript:
    events: list[Event]
    outcome: dict = field(default_factory=dict)

    def to_jsonl(self) -> str:
        lines = [e.to_json() for e in self.events]
        lines.append(json.dumps({"outcome": self.outcome}, sort_keys=True))
        return "\n".join(lines) + "\n"


class Scheduler:
    """Deterministic event queue ordered by (time, priority, insertion order)."""

    def __init__(self, server: PrintServer):
        self.server = server
        self._queue: list[tuple[float, int, int, Callable[[], None]]] = []
        self._seq = 0

    def at(self, t: float, priority: int, fn: Callable[[], None]) -> None:
        heapq.heappush(self._queue, (t, priority, self._seq, fn))
        self._seq += 1

    def run(self, horizon: float | None = None) -> None:
        while self._queue:
            t, _, _, fn = heapq.heappop(self._queue)
            if horizon is not None and t > horizon:
                break
            self.server.advance_to(t)
            fn()
        job = self.server.job
        if horizon is not None:
            self.server.advance_to(horizon)
        elif job is not None and job.state == "printing":
            self.server.advance_to(job.segment_start + job.total_time - job.job_time)


def _user_step(server: PrintServer, act: UserAction) -> Callable[[], None]:
    def step() -> None:
        try:
            if act.action == "upload":
                server.upload(act.name, act.data or b"", actor="user")
            elif act.action == "start":
                server.start_print(act.name, actor="user")
            elif act.action == "read":
                server.read_file(act.name, actor="user")
            elif act.action == "pause":
                server.pause(actor="user")
            elif act.action == "resume":
                server.resume(actor="user")
            elif act.action == "cancel":
                server.cancel(actor="user")
            else:
                raise ValueError(f"unknown user action {act.action!r}")
        except AccessDenied:
            pass  # the server already logged the denial
        except ServerError as exc:
            server.annotate("user", "failed", {"op": act.action, "name": act.name,
                                               "error": type(exc).__name__})
    return step


def _mutate(data: bytes, spec: AttackSpec) -> tuple[bytes, dict]:
    prog = parse_program(data.decode("utf-8"))
    mutated, audit = apply_attack(prog, spec)
    return serialize_program(mutated).encode(), {
        "modified": len(audit.modified), "inserted": len(audit.inserted),
        "removed": len(audit.removed), "n_lines": len(prog),
    }


def _outcome(server: PrintServer, original: str | None, mutated: str | None, **extra) -> dict:
    printed = None
    for event in server.events:
        if event.action == "start_print":
            printed = event.args["digest"]
    job = server.job
    final = job.digest if job is not None else None
    result = {"original_digest": original, "mutated_digest": mutated,
              "printed_digest": printed, "final_job_digest": final,
              "final_state": job.state if job else "idle"}
    result.update(extra)
    return result


def _setup(server: PrintServer, script: ScenarioScript) -> Scheduler:
    sched = Scheduler(server)
    for act in script.actions:
        sched.at(act.t, USER_FIRST, _user_step(server, act))
    return sched


def run_deferred_exploit(server: PrintServer, plan: IntrusionPlan,
                         script: ScenarioScript) -> Transcript:
    """Wait ``plan.delay`` after an upload, then swap in a mutated copy."""
    if plan.strategy is not Strategy.DEFERRED:
        raise PlanError("plan is not a deferred exploit")
    sched = _setup(server, script)
    state: dict = {"original": None, "mutated": None, "hit": False}

    def started(name: str) -> bool:
        return any(e.action == "start_print" and e.args.get("name") == name for e in server.events)

    def on_event(event: Event) -> None:
        if event.actor != "user" or event.action != "upload" or state["original"]:
            return
        name = event.args["name"]
        state["original"] = event.args["digest"]
        server.annotate("attacker", "detect", {"name": name, "digest": event.args["digest"]})

        def download() -> None:
            data = server.read_file(name, actor="attacker")
            mutated, stats = _mutate(data, plan.attack)
            finish = server.clock + plan.latency(stats["n_lines"])
            server.annotate("attacker", "mutate", {"name": name, **stats, "ready_at": finish})

            def reupload() -> None:
                # no re-check of user activity: a started print turns the swap into a miss
                try:
                    server.upload(name, mutated, actor="attacker")
                except (AccessDenied, StateError) as exc:
                    server.annotate("attacker", "miss", {"name": name, "reason": type(exc).__name__})
                    return
                state["mutated"] = server.files[name].digest
                if started(name):
                    server.annotate("attacker", "miss", {"name": name, "reason": "print started before re-upload"})
                else:
                    state["hit"] = True

            sched.at(finish, ATTACKER, reupload)

        sched.at(server.clock + plan.delay, ATTACKER, download)

    server.watch(on_event)
    sched.run(script.horizon)
    out = _outcome(server, state["original"], state["mutated"], strategy=plan.strategy.value,
                   hit=state["hit"] and _printed_is(server, state["mutated"]))
    return Transcript(list(server.events), out)


def _printed_is(server: PrintServer, digest: str | None) -> bool:
    for event in server.events:
        if event.action == "start_print":
            return event.args["digest"] == digest
    return digest is not None


def run_access_jam_swap(server: PrintServer, plan: IntrusionPlan,
                        script: ScenarioScript) -> Transcript:
    """Lock the upload immediately, swap it while the user is locked out."""
    if plan.strategy is not Strategy.ACCESS_JAM:
        raise PlanError("plan is not an access-jam swap")
    sched = _setup(server, script)
    state: dict = {"original": None, "mutated": None}

    def on_event(event: Event) -> None:
        if event.actor != "user" or event.action != "upload" or state["original"]:
            return
        name = event.args["name"]
        state["original"] = event.args["digest"]

        def jam() -> None:
            server.annotate("attacker", "detect", {"name": name, "digest": state["original"]})
            server.lock_file(name, plan.lock_duration, actor="attacker")
            data = server.read_file(name, actor="attacker")
            mutated, stats = _mutate(data, plan.attack)
            finish = server.clock + plan.latency(stats["n_lines"])
            server.annotate("attacker", "mutate", {"name": name, **stats, "ready_at": finish})

            def reupload() -> None:
                try:
                    server.upload(name, mutated, actor="attacker")
                except (AccessDenied, StateError) as exc:
                    server.annotate("attacker", "miss", {"name": name, "reason": type(exc).__name__})
                    return
                state["mutated"] = server.files[name].digest

            sched.at(finish, ATTACKER, reupload)

        sched.at(server.clock, PREEMPT, jam)

    server.watch(on_event)
    sched.run(script.horizon)
    final = server.files.get(next(iter(server.files), ""), None)
    out = _outcome(server, state["original"], state["mutated"], strategy=plan.strategy.value,
                   stored_digest=final.digest if final else None,
                   hit=state["mutated"] is not None and _printed_is(server, state["mutated"]))
    return Transcript(list(server.events), out)


def run_execution_phase_tamper(server: PrintServer, plan: IntrusionPlan,
                               script: ScenarioScript) -> Transcript:
    """Pause a running job after ``trigger_delay`` and splice in a mutated tail."""
    if plan.strategy is not Strategy.EXECUTION_PHASE:
        raise PlanError("plan is not an execution-phase tamper")
    sched = _setup(server, script)
    state: dict = {"original": None, "mutated": None, "splice": None}

    def on_event(event: Event) -> None:
        if event.action != "start_print" or state["original"]:
            return
        name = event.args["name"]
        state["original"] = event.args["digest"]
        server.annotate("attacker", "detect", {"name": name, "digest": state["original"]})

        def strike() -> None:
            status = server.printer_status()
            server.annotate("attacker", "status", {"state": status.state, "line_index": status.line_index,
                                                   "progress": status.progress})
            if status.state != "printing" or status.filename != name:
                server.annotate("attacker", "miss", {"name": name, "reason": f"job {status.state}"})
                return
            server.pause(actor="attacker")
            k = server.line_index
            data = server.read_file(name, actor="attacker")
            prog = parse_program(data.decode("utf-8"))
            spec = plan.attack
            if not plan.whole_file:
                spec = replace(spec, region=replace(spec.region, lines=(k, len(prog))))
            mutated, stats = _mutate(data, spec)
            server.upload(name, mutated, actor="attacker")
            state["mutated"] = server.files[name].digest
            state["splice"] = k
            resume_at = server.clock + plan.latency(stats["n_lines"])
            server.annotate("attacker", "mutate", {"name": name, "splice_index": k, **stats,
                                                   "resume_at": resume_at})
            sched.at(resume_at, ATTACKER, lambda: server.resume(actor="attacker"))

        sched.at(server.clock + plan.trigger_delay, ATTACKER, strike)

    server.watch(on_event)
    sched.run(script.horizon)
    out = _outcome(server, state["original"], state["mutated"], strategy=plan.strategy.value,
                   splice_index=state["splice"], hit=state["splice"] is not None)
    return Transcript(list(server.events), out)


def run_intrusion(server: PrintServer, plan: IntrusionPlan, script: ScenarioScript) -> Transcript:
    runner = {
        Strategy.DEFERRED: run_deferred_exploit,
        Strategy.ACCESS_JAM: run_access_jam_swap,
        Strategy.EXECUTION_PHASE: run_execution_phase_tamper,
    }[plan.strategy]
    return runner(server, plan, script)
