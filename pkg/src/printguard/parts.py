"""Slicer-like generator for rectangular test parts.

Produces plausible FDM programs (preheat, homing, perimeters, rectilinear
infill, layer changes) so tests and dataset generation do not depend on
external slicer output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .gcode import GcodeLine, GcodeProgram, make_line

FILAMENT_DIAMETER = 1.75


@dataclass(frozen=True)
class PartProfile:
    width: float = 20.0
    depth: float = 20.0
    layers: int = 25
    layer_height: float = 0.2
    first_layer_z: float = 0.2
    line_width: float = 0.45
    infill_spacing: float = 2.0
    perimeters: int = 2
    origin: tuple[float, float] = (100.0, 100.0)
    print_speed: float = 2400.0  # mm/min
    perimeter_speed: float = 1800.0
    travel_speed: float = 6000.0
    z_speed: float = 600.0
    relative_extrusion: bool = True
    hotend_temp: float = 200.0
    bed_temp: float = 60.0
    preheat: bool = True
    retract: float = 0.0

    @property
    def e_per_mm(self) -> float:
        area = math.pi * (FILAMENT_DIAMETER / 2) ** 2
        return self.line_width * self.layer_height / area


def _r(value: float) -> float:
    return round(value, 3)


def generate_part(profile: PartProfile = PartProfile()) -> GcodeProgram:
    p = profile
    lines: list[GcodeLine] = []
    add = lines.append
    if p.preheat:
        add(make_line("M104", S=p.hotend_temp))
        add(GcodeLine(command="M140", params={"S": p.bed_temp}, known=False,
                      raw=f"M140 S{p.bed_temp:g}"))
    add(make_line("G28"))
    add(make_line("G90"))
    add(make_line("M83" if p.relative_extrusion else "M82"))
    if p.preheat:
        add(GcodeLine(command="M190", params={"S": p.bed_temp}, known=False,
                      raw=f"M190 S{p.bed_temp:g}"))
        add(make_line("M109", S=p.hotend_temp))
    add(make_line("G92", E=0.0))

    e_abs = 0.0
    x0, y0 = p.origin

    def extrude_to(x: float, y: float, cur: list[float], feed: float | None) -> None:
        nonlocal e_abs
        length = math.hypot(x - cur[0], y - cur[1])
        de = round(length * p.e_per_mm, 5)
        params = {"X": _r(x), "Y": _r(y)}
        if p.relative_extrusion:
            params["E"] = de
        else:
            e_abs = round(e_abs + de, 5)
            params["E"] = e_abs
        if feed is not None:
            params["F"] = feed
        add(GcodeLine(command="G1", params=params))
        cur[0], cur[1] = x, y

    def retract(amount: float) -> None:
        # amount > 0 retracts, amount < 0 primes
        nonlocal e_abs
        if p.retract <= 0:
            return
        if p.relative_extrusion:
            add(make_line("G1", E=-amount, F=2400.0))
        else:
            e_abs = round(e_abs - amount, 5)
            add(make_line("G1", E=e_abs, F=2400.0))

    cur = [0.0, 0.0]
    for layer in range(p.layers):
        z = round(p.first_layer_z + layer * p.layer_height, 4)
        add(make_line("G1", Z=z, F=p.z_speed))
        for k in range(p.perimeters):
            inset = p.line_width * (k + 0.5)
            ax, ay = x0 + inset, y0 + inset
            bx, by = x0 + p.width - inset, y0 + p.depth - inset
            retract(p.retract)
            add(make_line("G0", X=_r(ax), Y=_r(ay), F=p.travel_speed))
            retract(-p.retract)
            cur = [ax, ay]
            feed: float | None = p.perimeter_speed
            for cx, cy in ((bx, ay), (bx, by), (ax, by), (ax, ay)):
                extrude_to(cx, cy, cur, feed)
                feed = None
        inset = p.line_width * (p.perimeters + 0.5)
        lo_x, hi_x = x0 + inset, x0 + p.width - inset
        lo_y, hi_y = y0 + inset, y0 + p.depth - inset
        horizontal = layer % 2 == 0
        span_lo, span_hi = (lo_y, hi_y) if horizontal else (lo_x, hi_x)
        n = max(1, int((span_hi - span_lo) / p.infill_spacing))
        for i in range(n + 1):
            t = span_lo + (span_hi - span_lo) * i / n
            if horizontal:
                a, b = (lo_x, t), (hi_x, t)
            else:
                a, b = (t, lo_y), (t, hi_y)
            if i % 2:
                a, b = b, a
            if i == 0:
                add(make_line("G0", X=_r(a[0]), Y=_r(a[1]), F=p.travel_speed))
            else:
                add(make_line("G0", X=_r(a[0]), Y=_r(a[1])))
            cur = list(a)
            extrude_to(b[0], b[1], cur, p.print_speed if i == 0 else None)
    add(make_line("G0", Z=_r(p.first_layer_z + p.layers * p.layer_height + 5.0), F=p.z_speed))
    add(make_line("M104", S=0.0))
    return GcodeProgram(tuple(lines))
