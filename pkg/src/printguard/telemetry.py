"""Virtual printer that turns a G-code program into Klipper-style telemetry.

The simulator is generative, not physical: each channel is driven by an
explicit causal coupling to what the program does (extrusion flow, command
rate, move durations, heater load) plus seeded noise, so tampering leaves
fingerprints of the right shape in the logs.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, fields
from typing import Any, Sequence

import numpy as np

from .gcode import GcodeProgram, interpret

SCHEMA_VERSION = 1

FEATURES: tuple[str, ...] = (
    "print_time", "sd_pos", "buffer_time", "gcodein",
    "mcu_temp", "chamber_temp", "bed_temp", "extruder_temp", "bed_pwm", "extruder_pwm",
    "sysload", "cputime", "memavail",
    "bytes_write", "bytes_read", "bytes_retransmit", "bytes_invalid", "send_seq", "receive_seq",
    "srtt", "rttvar", "rto",
    "mcu_task_avg", "mcu_task_stddev", "mcu_awake",
    "flow_rate",
)
COUNTERS = frozenset({
    "sd_pos", "cputime", "bytes_write", "bytes_read", "bytes_retransmit", "bytes_invalid",
    "send_seq", "receive_seq",
})
HOMING_SPEED = 50.0  # mm/s
WAIT_COMMANDS = {"M109": "extruder", "M190": "bed"}


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True, slots=True)
class LogRecord:
    print_time: float
    sd_pos: float
    buffer_time: float
    gcodein: float
    mcu_temp: float
    chamber_temp: float
    bed_temp: float
    extruder_temp: float
    bed_pwm: float
    extruder_pwm: float
    sysload: float
    cputime: float
    memavail: float
    bytes_write: float
    bytes_read: float
    bytes_retransmit: float
    bytes_invalid: float
    send_seq: float
    receive_seq: float
    srtt: float
    rttvar: float
    rto: float
    mcu_task_avg: float
    mcu_task_stddev: float
    mcu_awake: float
    flow_rate: float

    def to_dict(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in FEATURES}


assert tuple(f.name for f in fields(LogRecord)) == FEATURES


@dataclass(frozen=True)
class SimConfig:
    sample_period: float = 1.0
    substeps: int = 4
    ambient: float = 25.0
    extruder_heat: float = 4.0  # degC/s at pwm = 1
    extruder_cool: float = 0.01  # 1/s
    bed_heat: float = 1.0
    bed_cool: float = 0.01
    melt_load: float = 0.2  # degC/s per mm/s of filament
    kp: float = 0.08
    ki: float = 0.004
    bed_kp: float = 0.3
    bed_ki: float = 0.01
    sensor_noise: float = 0.08  # degC
    bytes_per_command: float = 38.0
    retransmit_rate: float = 1e-4  # per command
    invalid_rate: float = 2e-5
    status_rate: float = 2.0  # status polls per second
    base_rtt: float = 1.2  # ms
    lookahead: int = 16
    steps_per_mm: float = 80.0
    e_steps_per_mm: float = 400.0

    def __post_init__(self):
        physical = ("sample_period", "extruder_heat", "extruder_cool", "bed_heat", "bed_cool")
        for name in physical:
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise SimulationError(f"config constant {name}={value!r} must be finite and > 0")
        if self.substeps < 1:
            raise SimulationError("substeps must be >= 1")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


def thermal_step(temp: float, pwm: float, dt: float, heat: float, cool: float,
                 ambient: float, load: float = 0.0) -> float:
    """One explicit Euler step of the first-order heater model.

    ``load`` is an extra heat sink in degC/s (filament melting).
    """
    if dt <= 0:
        raise ValueError("dt must be > 0")
    return temp + dt * (heat * pwm - cool * (temp - ambient) - load)


class PIController:
    """Proportional-integral heater control with conditional integration."""

    def __init__(self, kp: float, ki: float):
        self.kp, self.ki = kp, ki
        self.integral = 0.0

    def __call__(self, target: float, measured: float, dt: float) -> float:
        if target <= 0:
            self.integral = 0.0
            return 0.0
        error = target - measured
        raw = self.kp * error + self.ki * self.integral
        if 0.0 < raw < 1.0 or (raw >= 1.0 and error < 0) or (raw <= 0.0 and error > 0):
            self.integral += error * dt
            raw = self.kp * error + self.ki * self.integral
        return min(1.0, max(0.0, raw))


def line_durations(prog: GcodeProgram) -> np.ndarray:
    """Kinematic duration of every line: distance / feedrate, plus G4 dwell.

    Extrude-only moves take |dE| / feedrate; heater waits count as zero
    here (the simulator resolves them against its thermal state).
    """
    durations = np.zeros(len(prog))
    for s in interpret(prog).states:
        line = prog.lines[s.line_index]
        if line.command == "G28":
            durations[s.line_index] = s.distance / HOMING_SPEED
            continue
        speed = s.feedrate / 60.0
        length = s.distance if s.distance > 0 else abs(s.delta_e)
        durations[s.line_index] = length / speed
    for i, line in enumerate(prog.lines):
        if line.command == "G4":
            p = line.params.get("P")
            sec = line.params.get("S")
            durations[i] = (p or 0.0) / 1000.0 + (sec or 0.0)
    return durations


@dataclass
class LogStream:
    """Sample-level telemetry as a matrix with one column per feature."""

    values: np.ndarray
    durations: np.ndarray
    manifest: dict[str, Any]
    line_start: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.values)

    @property
    def records(self) -> list[LogRecord]:
        return [LogRecord(*map(float, row)) for row in self.values]

    def column(self, name: str) -> np.ndarray:
        return self.values[:, FEATURES.index(name)]

    def to_jsonl(self) -> str:
        out = [json.dumps({"manifest": self.manifest}, sort_keys=True)]
        for row in self.values:
            out.append(json.dumps(dict(zip(FEATURES, map(float, row)))))
        return "\n".join(out) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("# " + json.dumps(self.manifest, sort_keys=True) + "\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(FEATURES)
        for row in self.values:
            writer.writerow([repr(float(v)) for v in row])
        return buf.getvalue()


def _line_bytes(prog: GcodeProgram) -> np.ndarray:
    return np.array([len(line.to_text()) + 1 for line in prog.lines], dtype=float)


def execute(prog: GcodeProgram, config: SimConfig = SimConfig(), seed: int = 0,
            context: dict | None = None) -> LogStream:
    """Run ``prog`` on the virtual printer and sample telemetry every period."""
    n = len(prog)
    durations = line_durations(prog)
    nbytes = _line_bytes(prog)
    trace = interpret(prog)
    delta_e = np.zeros(n)
    dist = np.zeros(n)
    for s in trace.states:
        delta_e[s.line_index] = s.delta_e
        dist[s.line_index] = s.distance
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "seed": seed,
        "config_digest": config.digest(),
        "program_digest": prog.digest() if n else "",
    }
    manifest.update(context or {})
    if n == 0:
        return LogStream(np.zeros((0, len(FEATURES))), durations, manifest, np.zeros(0))

    rng = np.random.default_rng(seed)
    T = config.sample_period
    sub_dt = T / config.substeps
    amb = config.ambient
    ext_temp = bed_temp = amb
    chamber = amb
    ext_ctl = PIController(config.kp, config.ki)
    bed_ctl = PIController(config.bed_kp, config.bed_ki)
    ext_target = bed_target = 0.0
    srtt, rttvar = config.base_rtt, config.base_rtt / 4
    sysload = 0.15
    counters = dict.fromkeys(COUNTERS, 0.0)
    line_start = np.full(n, np.nan)

    rows: list[list[float]] = []
    li = 0
    remaining = durations[0]
    started = False
    t = 0.0
    max_samples = int(10 * (durations.sum() + 3600) / T) + 10
    while li < n:
        if len(rows) > max_samples:
            raise SimulationError("simulation did not terminate; check heater constants")
        budget = T
        cmds = 0
        cmd_bytes = 0.0
        extruded = 0.0
        travelled = 0.0
        waiting = False
        while budget > 1e-12 and li < n:
            line = prog.lines[li]
            if not started:
                started = True
                line_start[li] = t + (T - budget)
                cmds += 1
                cmd_bytes += nbytes[li]
                cmd = line.command
                if cmd in ("M104", "M109"):
                    ext_target = line.params.get("S") or 0.0
                elif cmd in ("M140", "M190"):
                    bed_target = line.params.get("S") or 0.0
            wait_on = WAIT_COMMANDS.get(line.command or "")
            if wait_on is not None:
                temp, target = (ext_temp, ext_target) if wait_on == "extruder" else (bed_temp, bed_target)
                if target > 0 and temp < target - 1.0:
                    waiting = True
                    break
            dur = durations[li]
            take = min(remaining, budget)
            if dur > 0:
                frac = take / dur
                extruded += max(delta_e[li], 0.0) * frac
                travelled += dist[li] * frac
            remaining -= take
            budget -= take
            if remaining <= 1e-12:
                li += 1
                started = False
                if li < n:
                    remaining = durations[li]
        flow = extruded / T
        xy_speed = travelled / T

        ext_pwm_acc = bed_pwm_acc = 0.0
        for _ in range(config.substeps):
            measured = ext_temp + rng.normal(0.0, config.sensor_noise)
            pwm = ext_ctl(ext_target, measured, sub_dt)
            ext_temp = thermal_step(ext_temp, pwm, sub_dt, config.extruder_heat,
                                    config.extruder_cool, amb, config.melt_load * flow)
            ext_pwm_acc += pwm
            measured_bed = bed_temp + rng.normal(0.0, config.sensor_noise)
            bpwm = bed_ctl(bed_target, measured_bed, sub_dt)
            bed_temp = thermal_step(bed_temp, bpwm, sub_dt, config.bed_heat, config.bed_cool, amb)
            bed_pwm_acc += bpwm
        if not (math.isfinite(ext_temp) and math.isfinite(bed_temp)):
            raise SimulationError("non-finite heater state; check extruder_heat/extruder_cool")
        ext_pwm = ext_pwm_acc / config.substeps
        bed_pwm = bed_pwm_acc / config.substeps
        chamber += T * 0.002 * ((amb + 0.15 * (bed_temp - amb) + 0.02 * (ext_temp - amb)) - chamber)

        polls = config.status_rate * T
        counters["sd_pos"] += cmd_bytes
        usage = 0.06 + 0.004 * cmds / T + abs(rng.normal(0.0, 0.01)) + (0.02 if waiting else 0.0)
        counters["cputime"] += T * usage
        sysload += (usage * 2.0 - sysload) * (1 - math.exp(-T / 60.0))
        counters["bytes_write"] += config.bytes_per_command * cmds + rng.poisson(4 + 20 * polls)
        counters["bytes_read"] += 12 * cmds + rng.poisson(60 * polls)
        retrans = rng.poisson(config.retransmit_rate * (cmds + polls))
        counters["bytes_retransmit"] += 64 * retrans
        counters["bytes_invalid"] += 10 * rng.poisson(config.invalid_rate * (cmds + polls))
        counters["send_seq"] += cmds + polls + retrans
        counters["receive_seq"] += cmds + polls + rng.poisson(0.5)

        rtt = config.base_rtt + 0.01 * cmds / T + abs(rng.normal(0.0, 0.15))
        rttvar = 0.75 * rttvar + 0.25 * abs(srtt - rtt)
        srtt = 0.875 * srtt + 0.125 * rtt
        rto = max(1.0, srtt + 4 * rttvar)

        step_rate = xy_speed * config.steps_per_mm + flow * config.e_steps_per_mm
        task_avg = 6.0 + 0.0006 * step_rate + rng.normal(0.0, 0.08)
        task_std = 2.0 + 0.0003 * step_rate + abs(rng.normal(0.0, 0.05))
        awake = min(1.0, max(0.0, task_avg * 1e-6 * (step_rate + 1000.0)))

        ahead = remaining + durations[li + 1:li + 1 + config.lookahead].sum() if li < n else 0.0
        buffer_time = min(2.0, ahead)
        memavail = 6.0e8 - 4.0e3 * cmds + rng.normal(0.0, 1.5e5)
        mcu_temp = 38.0 + 4.0 * ext_pwm + 2.0 * bed_pwm + 0.05 * (chamber - amb) + rng.normal(0.0, 0.1)

        t += T
        rows.append([
            t, counters["sd_pos"], buffer_time, float(cmds),
            mcu_temp, chamber, bed_temp, ext_temp, bed_pwm, ext_pwm,
            sysload, counters["cputime"], memavail,
            counters["bytes_write"], counters["bytes_read"], counters["bytes_retransmit"],
            counters["bytes_invalid"], counters["send_seq"], counters["receive_seq"],
            srtt, rttvar, rto,
            task_avg, task_std, awake,
            flow,
        ])
    values = np.asarray(rows, dtype=float)
    if not np.isfinite(values).all():
        raise SimulationError("non-finite telemetry produced")
    # effective durations include heater waits resolved above
    ends = np.append(line_start[1:], t - budget)
    effective = ends - line_start
    return LogStream(values, effective, manifest, line_start)


def window_logs(stream: LogStream | np.ndarray, window: int) -> np.ndarray:
    """Aggregate consecutive samples into fixed windows of ``window`` periods.

    Gauges are averaged, counters become last-minus-first within the window;
    a trailing partial window is dropped.  ``window == 1`` returns the samples
    unchanged.
    """
    values = stream.values if isinstance(stream, LogStream) else np.asarray(stream)
    if window < 1:
        raise ValueError("window must cover at least one sampling period")
    if window == 1:
        return values.copy()
    count = len(values) // window
    if count == 0:
        return np.zeros((0, values.shape[1]))
    chunks = values[: count * window].reshape(count, window, values.shape[1])
    out = chunks.mean(axis=1)
    for name in COUNTERS:
        k = FEATURES.index(name)
        out[:, k] = chunks[:, -1, k] - chunks[:, 0, k]
    return out


def window_spans(n_samples: int, window: int, period: float = 1.0) -> list[tuple[float, float]]:
    """(start, end) time of every full window, matching :func:`window_logs`."""
    return [(i * window * period, (i + 1) * window * period) for i in range(n_samples // window)]


def records_to_matrix(records: Sequence[LogRecord]) -> np.ndarray:
    return np.array([[getattr(r, f) for f in FEATURES] for r in records], dtype=float)
