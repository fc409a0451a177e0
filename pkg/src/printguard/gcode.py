"""G-code parsing, interpretation and serialization.

Covers the Marlin/Klipper subset needed to mutate programs and to drive the
telemetry simulator.  Programs are immutable values; every transform in
:mod:`printguard.attacks` builds a new :class:`GcodeProgram`.

Normalization rule used by :func:`serialize_program`:

* blank and comment-only source lines are dropped;
* command letters and parameter letters are upper-cased, separated by one space;
* numbers are written with at most 5 fractional digits, trailing zeros removed;
* inline comments are kept as ``" ;text"``;
* lines with unknown commands are emitted verbatim (stripped).
"""

from __future__ import annotations

import bisect
import hashlib
import json
import math
import re
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

KNOWN_COMMANDS = frozenset(
    {
        "G0", "G1", "G4", "G28", "G90", "G91", "G92",
        "M0", "M23", "M24", "M25", "M28", "M82", "M83", "M104", "M109",
        "M111", "M154", "M206", "M221", "M404", "M579", "M928",
    }
)
MOTION_COMMANDS = frozenset({"G0", "G1", "G28"})
# commands whose argument is free text (a filename), not axis words
TEXT_ARG_COMMANDS = frozenset({"M23", "M28", "M928", "M117", "M118"})

DEFAULT_FEEDRATE = 1500.0  # mm/min

_WORD_RE = re.compile(r"^([A-Za-z])(.*)$")
_COMMAND_RE = re.compile(r"^([GMgm])(\d+)(?:\.(\d+))?$")


class GcodeParseError(ValueError):
    """Raised for malformed G-code; carries the 1-based source line number."""

    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class EmptyBoxError(ValueError):
    """No extruding moves exist, so there is no printed bounding box."""


def format_number(value: float) -> str:
    """Shortest decimal form with at most 5 fractional digits."""
    text = f"{value:.5f}".rstrip("0").rstrip(".")
    if text in ("-0", ""):
        return "0"
    return text


@dataclass(frozen=True)
class GcodeLine:
    command: str | None
    params: dict[str, float | None] = field(default_factory=dict)
    comment: str | None = None
    raw: str = ""
    text_arg: str | None = None
    sub: int | None = None
    known: bool = True

    @property
    def letter(self) -> str | None:
        return self.command[0] if self.command else None

    @property
    def number(self) -> int | None:
        return int(self.command[1:]) if self.command else None

    @property
    def is_motion(self) -> bool:
        return self.command in MOTION_COMMANDS

    def get(self, letter: str, default: float | None = None) -> float | None:
        return self.params.get(letter, default)

    def with_params(self, **updates: float | None) -> "GcodeLine":
        """Copy with parameters replaced; a ``None`` value removes the letter."""
        params = dict(self.params)
        for key, value in updates.items():
            if value is None:
                params.pop(key, None)
            else:
                params[key] = value
        return replace(self, params=params, raw="", known=True)

    def to_text(self) -> str:
        if not self.known or self.command is None:
            return self.raw.strip()
        parts = [self.command if self.sub is None else f"{self.command}.{self.sub}"]
        if self.text_arg is not None:
            parts.append(self.text_arg)
        for letter, value in self.params.items():
            parts.append(letter if value is None else letter + format_number(value))
        text = " ".join(parts)
        if self.comment:
            text += " ;" + self.comment
        return text


def make_line(command: str, comment: str | None = None, **params: float) -> GcodeLine:
    """Build a known line programmatically, e.g. ``make_line("G0", X=1.0)``."""
    return GcodeLine(command=command, params=dict(params), comment=comment)


@dataclass(frozen=True)
class GcodeProgram:
    lines: tuple[GcodeLine, ...] = ()

    def __len__(self) -> int:
        return len(self.lines)

    def __iter__(self):
        return iter(self.lines)

    def __getitem__(self, index):
        return self.lines[index]

    @property
    def extrusion_mode(self) -> str:
        """E mode in force at the first E-bearing move (or at the end), default absolute."""
        relative = False
        for line in self.lines:
            if line.command in ("M82", "G90"):
                relative = False
            elif line.command in ("M83", "G91"):
                relative = True
            elif line.command in ("G0", "G1") and "E" in line.params:
                break
        return "relative" if relative else "absolute"

    @property
    def positioning_mode(self) -> str:
        for line in self.lines:
            if line.command == "G90":
                return "absolute"
            if line.command == "G91":
                return "relative"
        return "absolute"

    @property
    def opaque_indices(self) -> list[int]:
        return [i for i, line in enumerate(self.lines) if not line.known]

    def motion_count(self) -> int:
        return sum(1 for line in self.lines if line.is_motion)

    def digest(self) -> str:
        return hashlib.sha256(serialize_program(self).encode()).hexdigest()


def _parse_line(text: str, lineno: int) -> GcodeLine | None:
    code, sep, comment = text.partition(";")
    code = code.strip()
    comment_text = comment.strip() if sep else None
    if not code:
        return None
    words = code.split()
    head = _COMMAND_RE.match(words[0])
    if head is None:
        # N-words, T-words, host commands: keep verbatim
        return GcodeLine(command=None, raw=text, comment=comment_text, known=False)
    command = f"{head.group(1).upper()}{int(head.group(2))}"
    sub = int(head.group(3)) if head.group(3) is not None else None
    known = command in KNOWN_COMMANDS
    if command in TEXT_ARG_COMMANDS:
        arg = code[len(words[0]):].strip() or None
        return GcodeLine(command=command, comment=comment_text, raw=text,
                         text_arg=arg, sub=sub, known=known)
    params: dict[str, float | None] = {}
    for word in words[1:]:
        match = _WORD_RE.match(word)
        if match is None:
            raise GcodeParseError(lineno, f"bad word {word!r}")
        letter = match.group(1).upper()
        if letter in params:
            raise GcodeParseError(lineno, f"duplicate parameter {letter}")
        literal = match.group(2)
        if literal == "":
            params[letter] = None
            continue
        try:
            value = float(literal)
        except ValueError:
            raise GcodeParseError(lineno, f"malformed number {word!r}") from None
        if not math.isfinite(value):
            raise GcodeParseError(lineno, f"non-finite number {word!r}")
        params[letter] = value
    return GcodeLine(command=command, params=params, comment=comment_text, raw=text,
                     sub=sub, known=known)


def parse_program(text: str) -> GcodeProgram:
    """Parse G-code source.  Blank and comment-only lines are skipped."""
    lines = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _parse_line(raw.rstrip("\r"), lineno)
        if line is not None:
            lines.append(line)
    return GcodeProgram(tuple(lines))


def serialize_program(prog: GcodeProgram) -> str:
    if not prog.lines:
        return ""
    return "\n".join(line.to_text() for line in prog.lines) + "\n"


@dataclass(frozen=True, slots=True)
class MotionState:
    """Machine state right after one motion line executes."""

    line_index: int
    x: float
    y: float
    z: float
    e: float  # logical E register
    extruded: float  # cumulative extruded filament
    feedrate: float
    absolute_positioning: bool
    absolute_extrusion: bool
    offsets: tuple[float, float, float]
    delta_e: float
    distance: float
    start: tuple[float, float, float]

    @property
    def position(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.z)

    @property
    def is_extruding(self) -> bool:
        return self.delta_e > 0


@dataclass
class Interpretation:
    states: list[MotionState]
    warnings: list[str]

    def __len__(self) -> int:
        return len(self.states)

    def __iter__(self):
        return iter(self.states)

    def __getitem__(self, index):
        return self.states[index]


def interpret(prog: GcodeProgram, *, retraction: bool = True) -> Interpretation:
    """Run the program through a simple Marlin-style interpreter.

    With ``retraction=False`` negative extrusion deltas are ignored for the
    cumulative tally, making it non-decreasing.
    """
    pos = [0.0, 0.0, 0.0]
    offsets = [0.0, 0.0, 0.0]
    e_logical = 0.0
    extruded = 0.0
    feedrate = DEFAULT_FEEDRATE
    abs_pos = True
    abs_e = True
    mode_declared = False
    warned = False
    states: list[MotionState] = []
    warnings: list[str] = []
    axes = ("X", "Y", "Z")

    for index, line in enumerate(prog.lines):
        cmd = line.command
        if cmd == "G90":
            abs_pos, abs_e, mode_declared = True, True, True
        elif cmd == "G91":
            abs_pos, abs_e, mode_declared = False, False, True
        elif cmd == "M82":
            abs_e, mode_declared = True, True
        elif cmd == "M83":
            abs_e, mode_declared = False, True
        elif cmd == "G92" and line.sub is None:
            if not line.params:
                offsets = [pos[0], pos[1], pos[2]]
                e_logical = 0.0
            for k, axis in enumerate(axes):
                value = line.params.get(axis)
                if value is not None:
                    offsets[k] = pos[k] - value
            value = line.params.get("E")
            if value is not None:
                e_logical = value
        elif cmd == "G28":
            start = tuple(pos)
            named = [a for a in axes if a in line.params]
            for k, axis in enumerate(axes):
                if not named or axis in named:
                    pos[k] = 0.0
                    offsets[k] = 0.0
            dist = math.dist(start, pos)
            states.append(MotionState(index, pos[0], pos[1], pos[2], e_logical, extruded,
                                      feedrate, abs_pos, abs_e, tuple(offsets), 0.0, dist, start))
        elif cmd in ("G0", "G1"):
            if not mode_declared and not warned:
                warnings.append(
                    f"line {index}: motion before any positioning mode; "
                    "using absolute positioning, absolute extrusion, F1500"
                )
                warned = True
            start = tuple(pos)
            for k, axis in enumerate(axes):
                value = line.params.get(axis)
                if value is None:
                    continue
                pos[k] = value + offsets[k] if abs_pos else pos[k] + value
            delta_e = 0.0
            value = line.params.get("E")
            if value is not None:
                delta_e = value - e_logical if abs_e else value
                e_logical = value if abs_e else e_logical + value
            if delta_e > 0 or retraction:
                extruded += delta_e
            f = line.params.get("F")
            if f is not None and f > 0:
                feedrate = f
            states.append(MotionState(index, pos[0], pos[1], pos[2], e_logical, extruded,
                                      feedrate, abs_pos, abs_e, tuple(offsets), delta_e,
                                      math.dist(start, pos), start))
    return Interpretation(states, warnings)


def _in_range(z: float, z_range: tuple[float, float] | None) -> bool:
    if z_range is None:
        return True
    lo, hi = z_range
    return lo - 1e-9 <= z <= hi + 1e-9


def total_extrusion(prog: GcodeProgram | Interpretation,
                    z_range: tuple[float, float] | None = None) -> float:
    """Sum of positive extrusion deltas whose move ends at a z inside ``z_range``."""
    if z_range is not None and z_range[0] > z_range[1]:
        raise ValueError(f"inverted z range {z_range}")
    trace = prog if isinstance(prog, Interpretation) else interpret(prog)
    return math.fsum(s.delta_e for s in trace.states if s.delta_e > 0 and _in_range(s.z, z_range))


@dataclass(frozen=True)
class BoundingBox:
    min: tuple[float, float, float]
    max: tuple[float, float, float]

    @property
    def extents(self) -> tuple[float, float, float]:
        return tuple(hi - lo for lo, hi in zip(self.min, self.max))

    @property
    def center(self) -> tuple[float, float, float]:
        return tuple((hi + lo) / 2 for lo, hi in zip(self.min, self.max))


def bounding_box(prog: GcodeProgram | Interpretation) -> BoundingBox:
    """Axis-aligned box over start and end points of every extruding move."""
    trace = prog if isinstance(prog, Interpretation) else interpret(prog)
    lo = [math.inf] * 3
    hi = [-math.inf] * 3
    for s in trace.states:
        if s.delta_e <= 0:
            continue
        for point in (s.start, s.position):
            for k in range(3):
                lo[k] = min(lo[k], point[k])
                hi[k] = max(hi[k], point[k])
    if lo[0] == math.inf:
        raise EmptyBoxError("program has no extruding moves")
    return BoundingBox(tuple(lo), tuple(hi))


@dataclass(frozen=True)
class Layer:
    z: float
    first_line: int
    last_line: int


@dataclass(frozen=True)
class LayerIndex:
    layers: tuple[Layer, ...]

    def __len__(self) -> int:
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)

    def __getitem__(self, index):
        return self.layers[index]

    @property
    def heights(self) -> list[float]:
        return [layer.z for layer in self.layers]

    def layer_at(self, z: float) -> int | None:
        heights = self.heights
        i = bisect.bisect_left(heights, z - 1e-9)
        if i < len(heights) and abs(heights[i] - z) <= 1e-9:
            return i
        return None


def build_layer_index(prog: GcodeProgram | Interpretation) -> LayerIndex:
    """One entry per distinct extruding z, ascending.

    A revisited z (e.g. after a non-monotone z path) extends the existing
    entry, so line ranges may then interleave; vase-mode programs get one
    entry per z value.
    """
    trace = prog if isinstance(prog, Interpretation) else interpret(prog)
    spans: dict[float, list[int]] = {}
    for s in trace.states:
        if s.delta_e <= 0:
            continue
        span = spans.get(s.z)
        if span is None:
            spans[s.z] = [s.line_index, s.line_index]
        else:
            span[1] = s.line_index
    return LayerIndex(tuple(Layer(z, a, b) for z, (a, b) in sorted(spans.items())))


def program_summary(prog: GcodeProgram) -> dict:
    trace = interpret(prog)
    summary = {
        "line_count": len(prog),
        "motion_lines": prog.motion_count(),
        "total_extrusion": total_extrusion(trace),
        "layer_count": len(build_layer_index(trace)),
        "extrusion_mode": prog.extrusion_mode,
        "digest": prog.digest(),
        "warnings": trace.warnings,
    }
    try:
        box = bounding_box(trace)
        summary["bounding_box"] = {"min": list(box.min), "max": list(box.max)}
    except EmptyBoxError:
        summary["bounding_box"] = None
    return summary


def summary_json(prog: GcodeProgram) -> str:
    return json.dumps(program_summary(prog), indent=2, sort_keys=True)


def lines_from(items: Iterable[GcodeLine]) -> GcodeProgram:
    return GcodeProgram(tuple(items))


def layer_of_lines(trace: Interpretation, n_lines: int) -> list[float]:
    """z position in force at every program line (after that line runs)."""
    zs = [0.0] * n_lines
    it = iter(trace.states)
    nxt = next(it, None)
    z = 0.0
    for i in range(n_lines):
        while nxt is not None and nxt.line_index == i:
            z = nxt.z
            nxt = next(it, None)
        zs[i] = z
    return zs


def motion_states_by_line(trace: Interpretation) -> dict[int, MotionState]:
    return {s.line_index: s for s in trace.states}


def digest_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def as_program(source: GcodeProgram | str | bytes) -> GcodeProgram:
    if isinstance(source, GcodeProgram):
        return source
    if isinstance(source, bytes):
        source = source.decode("utf-8")
    return parse_program(source)


__all__: Sequence[str] = [
    "BoundingBox", "EmptyBoxError", "GcodeLine", "GcodeParseError", "GcodeProgram",
    "Interpretation", "Layer", "LayerIndex", "MotionState", "as_program", "bounding_box",
    "build_layer_index", "digest_bytes", "format_number", "interpret", "make_line",
    "parse_program", "program_summary", "serialize_program", "total_extrusion",
]
