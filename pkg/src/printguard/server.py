"""Deterministic virtual print server (Moonraker/OctoPrint-like).

State is mutated only through :class:`PrintServer` methods, each of which
appends an :class:`Event` to the log.  Events produced by the server itself
(lock expiry, job completion, splices) carry ``actor="system"`` and are
re-derived, not re-applied, during :meth:`PrintServer.replay`.
"""

from __future__ import annotations

import bisect
import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Iterable

import numpy as np

from .gcode import GcodeParseError, interpret, layer_of_lines, parse_program
from .telemetry import line_durations

ACTORS = ("user", "attacker", "system")


class ServerError(Exception):
    pass


class AccessDenied(ServerError):
    pass


class NotFound(ServerError):
    pass


class LockConflict(ServerError):
    pass


class StateError(ServerError):
    pass


@dataclass(frozen=True)
class Event:
    t: float
    actor: str
    action: str
    args: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"t": self.t, "actor": self.actor, "action": self.action,
                           "args": self.args}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Event":
        data = json.loads(text)
        return cls(data["t"], data["actor"], data["action"], data.get("args", {}))


@dataclass
class Lock:
    owner: str
    expires: float


@dataclass
class StoredFile:
    data: bytes
    digest: str
    uploaded_at: float
    lock: Lock | None = None


@dataclass
class Job:
    name: str
    digest: str
    state: str  # queued | printing | paused | complete | cancelled
    prefix: np.ndarray  # cumulative end time of each line
    motion_prefix: np.ndarray  # motion lines among the first k lines
    zs: list[float]
    job_time: float = 0.0  # printing time consumed when the segment began
    segment_start: float = 0.0  # clock when printing (re)started
    paused_index: int = 0

    @property
    def n_lines(self) -> int:
        return len(self.prefix)

    @property
    def total_time(self) -> float:
        return float(self.prefix[-1]) if len(self.prefix) else 0.0


@dataclass(frozen=True)
class StatusSnapshot:
    state: str
    filename: str | None
    progress: float
    line_index: int
    current_z: float | None
    clock: float


def _digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _job_tables(data: bytes):
    prog = parse_program(data.decode("utf-8"))
    durations = line_durations(prog)
    motion = np.cumsum([0] + [1 if line.is_motion else 0 for line in prog.lines])
    zs = layer_of_lines(interpret(prog), len(prog))
    return np.cumsum(durations), motion, zs


class PrintServer:
    """File store, print queue and status API on a simulated clock."""

    def __init__(self):
        self.clock = 0.0
        self.files: dict[str, StoredFile] = {}
        self.job: Job | None = None
        self.events: list[Event] = []
        self.blobs: dict[str, bytes] = {}
        self._watchers: list[Callable[[Event], None]] = []
        self._replaying = False

    # -- bookkeeping -----------------------------------------------------------------
    def _log(self, actor: str, action: str, t: float | None = None, **args) -> Event:
        event = Event(self.clock if t is None else t, actor, action, args)
        self.events.append(event)
        if not self._replaying:
            for watcher in list(self._watchers):
                watcher(event)
        return event

    def watch(self, callback: Callable[[Event], None]) -> None:
        """Register a callback invoked after every logged event."""
        self._watchers.append(callback)

    def annotate(self, actor: str, action: str, args: dict | None = None) -> Event:
        """Log a non-mutating note (adversary bookkeeping, exfiltration, misses)."""
        return self._log(actor, action, **(args or {}))

    def _accessible(self, name: str, actor: str, op: str) -> StoredFile:
        stored = self.files.get(name)
        if stored is None:
            raise NotFound(name)
        if stored.lock is not None and stored.lock.owner != actor:
            self._log(actor, "jammed", op=op, name=name, owner=stored.lock.owner)
            raise AccessDenied(f"{name} is locked")
        return stored

    # -- file API --------------------------------------------------------------------
    def upload(self, name: str, data: bytes, actor: str = "user", force: bool = False) -> None:
        if not name:
            raise ValueError("file name must be non-empty")
        if not force:
            try:
                parse_program(data.decode("utf-8"))
            except (UnicodeDecodeError, GcodeParseError) as exc:
                raise ValueError(f"upload {name!r} is not valid G-code: {exc}") from exc
        previous = self.files.get(name)
        if previous is not None:
            self._accessible(name, actor, "upload")
            if self.job and self.job.name == name and self.job.state == "printing":
                raise StateError(f"{name} is being printed")
        digest = _digest(data)
        self.blobs[digest] = bytes(data)
        lock = previous.lock if previous is not None else None
        self.files[name] = StoredFile(bytes(data), digest, self.clock, lock)
        action = "replace" if previous is not None else "upload"
        self._log(actor, action, name=name, digest=digest, size=len(data),
                  previous=previous.digest if previous else None)

    def read_file(self, name: str, actor: str = "user") -> bytes:
        stored = self._accessible(name, actor, "read")
        self._log(actor, "read", name=name, digest=stored.digest)
        return stored.data

    def delete(self, name: str, actor: str = "user") -> None:
        self._accessible(name, actor, "delete")
        if self.job and self.job.name == name and self.job.state in ("printing", "paused"):
            raise StateError(f"{name} is in use")
        del self.files[name]
        self._log(actor, "delete", name=name)

    def lock_file(self, name: str, duration: float, actor: str = "attacker") -> None:
        stored = self.files.get(name)
        if stored is None:
            raise NotFound(name)
        if stored.lock is not None and stored.lock.owner != actor:
            raise LockConflict(f"{name} already locked by {stored.lock.owner}")
        stored.lock = Lock(actor, self.clock + duration)
        self._log(actor, "lock", name=name, duration=duration, expires=stored.lock.expires)

    def unlock_file(self, name: str, actor: str = "attacker") -> None:
        stored = self.files.get(name)
        if stored is None:
            raise NotFound(name)
        if stored.lock is None:
            return
        if stored.lock.owner != actor:
            raise LockConflict(f"{name} locked by {stored.lock.owner}")
        stored.lock = None
        self._log(actor, "unlock", name=name)

    # -- job API ---------------------------------------------------------------------
    def start_print(self, name: str, actor: str = "user") -> None:
        if self.job is not None and self.job.state in ("printing", "paused"):
            raise StateError("a job is already active")
        stored = self._accessible(name, actor, "start_print")
        prefix, motion, zs = _job_tables(stored.data)
        self.job = Job(name, stored.digest, "queued", prefix, motion, zs)
        self._log(actor, "queued", name=name, digest=stored.digest)
        self.job.state = "printing"
        self.job.segment_start = self.clock
        self._log(actor, "start_print", name=name, digest=stored.digest)
        self._check_complete()

    def _job_time(self) -> float:
        job = self.job
        if job is None:
            return 0.0
        if job.state == "printing":
            return min(job.total_time, job.job_time + (self.clock - job.segment_start))
        return job.job_time

    def _line_index(self, job_time: float) -> int:
        """Lines completed once ``job_time`` seconds of printing have elapsed."""
        return bisect.bisect_right(self.job.prefix, job_time)

    def pause(self, actor: str = "user") -> None:
        job = self.job
        if job is None or job.state != "printing":
            raise StateError("no printing job to pause")
        elapsed = self._job_time()
        # M25 semantics: the move in flight completes before the pause lands
        k = bisect.bisect_left(self._starts(), elapsed)
        job.job_time = float(job.prefix[k - 1]) if k else 0.0
        job.paused_index = k
        job.state = "paused"
        self._log(actor, "pause", name=job.name, line_index=k)

    def _starts(self) -> np.ndarray:
        prefix = self.job.prefix
        durations = np.diff(np.concatenate(([0.0], prefix)))
        return prefix - durations

    def resume(self, actor: str = "user") -> None:
        job = self.job
        if job is None or job.state != "paused":
            raise StateError("no paused job to resume")
        stored = self.files.get(job.name)
        k = self.line_index
        if stored is not None and stored.digest != job.digest:
            prefix, motion, zs = _job_tables(stored.data)
            offset = float(prefix[k - 1]) if k else 0.0
            job.prefix, job.motion_prefix, job.zs = prefix, motion, zs
            old = job.digest
            job.digest = stored.digest
            job.job_time = offset
            self._log("system", "splice", name=job.name, line_index=k, old=old, new=stored.digest)
        job.state = "printing"
        job.segment_start = self.clock
        self._log(actor, "resume", name=job.name, line_index=k)
        self._check_complete()

    def cancel(self, actor: str = "user") -> None:
        job = self.job
        if job is None or job.state not in ("printing", "paused"):
            raise StateError("no active job to cancel")
        job.job_time = self._job_time()
        job.state = "cancelled"
        self._log(actor, "cancel", name=job.name)

    @property
    def line_index(self) -> int:
        """Index of the next line to execute."""
        if self.job is None:
            return 0
        if self.job.state == "paused":
            return self.job.paused_index
        return self._line_index(self._job_time())

    def printer_status(self) -> StatusSnapshot:
        job = self.job
        if job is None:
            return StatusSnapshot("idle", None, 0.0, 0, None, self.clock)
        k = self.line_index
        total_motion = int(job.motion_prefix[-1])
        progress = 1.0 if job.state == "complete" else (
            float(job.motion_prefix[k]) / total_motion if total_motion else 0.0)
        z = job.zs[k - 1] if k else None
        return StatusSnapshot(job.state, job.name, progress, k, z, self.clock)

    # -- clock -----------------------------------------------------------------------
    def _check_complete(self) -> None:
        job = self.job
        if job is None or job.state != "printing":
            return
        end = job.segment_start + (job.total_time - job.job_time)
        if self.clock >= end:
            job.job_time = job.total_time
            job.state = "complete"
            self._log("system", "complete", t=max(end, job.segment_start), name=job.name)

    def advance_clock(self, dt: float) -> None:
        if dt < 0:
            raise ValueError("dt must be >= 0")
        target = self.clock + dt
        pending: list[tuple[float, int, str]] = []
        for order, (name, stored) in enumerate(sorted(self.files.items())):
            if stored.lock is not None and stored.lock.expires <= target:
                pending.append((stored.lock.expires, order, name))
        job = self.job
        finish = None
        if job and job.state == "printing":
            finish = job.segment_start + (job.total_time - job.job_time)
        for when, _, name in sorted(pending):
            if finish is not None and finish <= when:
                self.clock = max(self.clock, finish)
                self._check_complete()
                finish = None
            self.clock = max(self.clock, when)
            self.files[name].lock = None
            self._log("system", "unlock", name=name, reason="expired")
        self.clock = target
        self._check_complete()

    def advance_to(self, t: float) -> None:
        if t > self.clock:
            self.advance_clock(t - self.clock)

    # -- event sourcing --------------------------------------------------------------
    def state_dict(self) -> dict:
        job = None
        if self.job is not None:
            j = self.job
            job = {"name": j.name, "digest": j.digest, "state": j.state,
                   "job_time": j.job_time, "segment_start": j.segment_start,
                   "line_index": self.line_index}
        return {
            "clock": self.clock,
            "files": {name: {"digest": f.digest, "uploaded_at": f.uploaded_at,
                             "lock": asdict(f.lock) if f.lock else None}
                      for name, f in sorted(self.files.items())},
            "job": job,
            "events": [e.to_json() for e in self.events],
        }

    def state_digest(self) -> str:
        return _digest(json.dumps(self.state_dict(), sort_keys=True).encode())

    def transcript(self) -> str:
        return "".join(e.to_json() + "\n" for e in self.events)

    @classmethod
    def replay(cls, events: Iterable[Event], blobs: dict[str, bytes],
               until: float | None = None) -> "PrintServer":
        """Rebuild a server by re-applying every user/attacker event in order."""
        server = cls()
        server._replaying = True
        for event in events:
            if event.actor == "system":
                continue
            server.advance_to(event.t)
            a = event.args
            action = event.action
            if action in ("upload", "replace"):
                server.upload(a["name"], blobs[a["digest"]], actor=event.actor, force=True)
            elif action == "read":
                server.read_file(a["name"], actor=event.actor)
            elif action == "delete":
                server.delete(a["name"], actor=event.actor)
            elif action == "lock":
                server.lock_file(a["name"], a["duration"], actor=event.actor)
            elif action == "unlock":
                server.unlock_file(a["name"], actor=event.actor)
            elif action == "queued":
                continue  # emitted together with start_print
            elif action == "start_print":
                server.start_print(a["name"], actor=event.actor)
            elif action == "pause":
                server.pause(actor=event.actor)
            elif action == "resume":
                server.resume(actor=event.actor)
            elif action == "cancel":
                server.cancel(actor=event.actor)
            else:
                # outcomes and notes (jammed, detect, miss, ...) are appended verbatim
                server.events.append(event)
        if until is not None:
            server.advance_to(until)
        server._replaying = False
        return server


def load_transcript(text: str) -> list[Event]:
    return [Event.from_json(line) for line in text.splitlines() if line.strip()]
