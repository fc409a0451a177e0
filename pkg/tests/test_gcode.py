from __future__ import annotations

import difflib

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import oracle_extents, oracle_extrusion, oracle_layer_count
from printguard.gcode import (EmptyBoxError, GcodeParseError, bounding_box, build_layer_index,
                              format_number, interpret, parse_program, serialize_program,
                              total_extrusion)


def test_parse_single_line_fields():
    (line,) = parse_program("G1 X10 Y5 E0.4").lines
    assert line.command == "G1"
    assert line.params == {"X": 10.0, "Y": 5.0, "E": 0.4}


def test_empty_source_has_no_lines():
    assert len(parse_program("")) == 0


def test_cube_fixture_line_count_and_mode(cube):
    assert len(cube) == 20
    assert cube.lines[2].command == "M83"
    assert cube.extrusion_mode == "relative"


def test_subcode_normalized():
    (line,) = parse_program("G92.1").lines
    assert (line.command, line.sub) == ("G92", 1)
    assert serialize_program(parse_program("G92.1")) == "G92.1\n"


@pytest.mark.parametrize("text", ["G1 X1..2", "G1 Xabc", "G1 X1 X2", "G1 Xnan"])
def test_parse_errors_name_line(text):
    with pytest.raises(GcodeParseError, match="line 2"):
        parse_program("G90\n" + text)


def test_unknown_commands_preserved_opaquely():
    prog = parse_program("M140 S60\nT0\nG1 X1")
    assert not prog.lines[0].known and not prog.lines[1].known
    assert serialize_program(prog) == "M140 S60\nT0\nG1 X1\n"


def test_roundtrip_fixture_is_stable(cube_text, cube):
    once = serialize_program(cube)
    assert once == cube_text  # fixture is already in normal form
    assert serialize_program(parse_program(once)) == once


def test_trailing_zero_rule():
    assert serialize_program(parse_program("G1 E0.40000")) == "G1 E0.4\n"
    assert format_number(-0.0) == "0"
    assert format_number(1.234567) == "1.23457"


def test_one_scaled_e_value_changes_exactly_one_line(cube):
    idx = 6
    line = cube.lines[idx]
    lines = list(cube.lines)
    lines[idx] = line.with_params(E=line.get("E") * 0.5)
    mutated = type(cube)(tuple(lines))
    diff = [d for d in difflib.ndiff(serialize_program(cube).splitlines(),
                                     serialize_program(mutated).splitlines()) if d[:1] in "+-"]
    assert len(diff) == 2  # one removed, one added


def test_relative_positioning_accumulates():
    trace = interpret(parse_program("G91\nG1 X1\nG1 X1"))
    assert trace[-1].x == 2.0


def test_g92_resets_logical_e_not_tally():
    trace = interpret(parse_program("M83\nG1 E0.5\nG92 E0\nG1 E0.5"))
    assert trace[-1].extruded == 1.0


def test_default_modes_warn():
    trace = interpret(parse_program("G1 X5 E1"))
    assert trace.warnings and "absolute" in trace.warnings[0]
    assert trace[0].feedrate == 1500.0


def test_cube_extrusion_matches_scripted_oracle(cube_text, cube):
    assert total_extrusion(cube) == pytest.approx(oracle_extrusion(cube_text), abs=1e-9)
    assert total_extrusion(cube) == pytest.approx(6.0, abs=1e-12)


def test_part_extrusion_matches_scripted_oracle(part25):
    text = serialize_program(part25)
    assert total_extrusion(part25) == pytest.approx(oracle_extrusion(text), abs=1e-9)


def test_total_extrusion_small_cases(part25):
    assert total_extrusion(parse_program("M83\nG1 E2.0")) == 2.0
    assert total_extrusion(part25, (100.0, 200.0)) == 0.0
    with pytest.raises(ValueError):
        total_extrusion(part25, (4.0, 2.0))


def test_slab_extrusion_matches_oracle(part25):
    text = serialize_program(part25)
    got = total_extrusion(part25, (2.0, 4.0))
    assert got > 0
    assert got == pytest.approx(oracle_extrusion(text, (2.0, 4.0)), abs=1e-9)


def test_square_perimeter_box():
    prog = parse_program("G90\nM83\nG1 Z0.2\nG1 X10 E1\nG1 Y10 E1\nG1 X0 E1\nG1 Y0 E1")
    box = bounding_box(prog)
    assert box.min == (0.0, 0.0, 0.2) and box.max == (10.0, 10.0, 0.2)


def test_box_requires_extrusion():
    with pytest.raises(EmptyBoxError):
        bounding_box(parse_program("G90\nG1 X10"))


def test_box_matches_oracle(part25, cube_text, cube):
    for prog, text in ((part25, serialize_program(part25)), (cube, cube_text)):
        lo, hi = oracle_extents(text)
        box = bounding_box(prog)
        assert list(box.min) == pytest.approx(lo, abs=1e-12)
        assert list(box.max) == pytest.approx(hi, abs=1e-12)


def test_layer_index_cases(cube, part25):
    idx = build_layer_index(cube)
    assert idx.heights == [0.2, 0.4, 0.6]
    single = build_layer_index(parse_program("M83\nG1 Z0.2\nG1 X1 E1\nG1 X2 E1\nG1 X3 E1"))
    assert len(single) == 1 and (single[0].first_line, single[0].last_line) == (2, 4)
    assert len(build_layer_index(part25)) == oracle_layer_count(serialize_program(part25)) == 25


def test_layer_index_ordered_and_disjoint(part25):
    idx = build_layer_index(part25)
    assert all(a.z < b.z for a, b in zip(idx, idx.layers[1:]))
    assert all(a.last_line < b.first_line for a, b in zip(idx, idx.layers[1:]))


# -- properties -------------------------------------------------------------------------------

_num = st.floats(min_value=-50, max_value=50, allow_nan=False).map(lambda v: round(v, 3))
_mode = st.sampled_from(["G90", "G91", "M82", "M83", "G92 E0"])


@st.composite
def programs(draw):
    lines = []
    for _ in range(draw(st.integers(0, 25))):
        kind = draw(st.integers(0, 3))
        if kind == 0:
            lines.append(draw(_mode))
        elif kind == 1:
            lines.append(f"G1 X{draw(_num)} Y{draw(_num)} E{abs(draw(_num)) / 10:.4f}")
        elif kind == 2:
            lines.append(f"G0 Z{abs(draw(_num)):.2f} F{draw(st.integers(60, 9000))}")
        else:
            lines.append(f"G1 E{draw(_num) / 10:.4f}")
    return "\n".join(lines)


@settings(max_examples=150, deadline=None)
@given(programs())
def test_roundtrip_preserves_motion_states(text):
    prog = parse_program(text)
    again = parse_program(serialize_program(prog))
    assert interpret(again).states == interpret(prog).states


@settings(max_examples=100, deadline=None)
@given(programs())
def test_cumulative_monotone_without_retraction(text):
    trace = interpret(parse_program(text), retraction=False)
    tallies = [s.extruded for s in trace]
    assert all(a <= b for a, b in zip(tallies, tallies[1:]))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(min_value=0.0, max_value=5.0).map(lambda v: round(v, 3)), min_size=1, max_size=5))
def test_mode_soundness(values):
    literals = "\n".join(f"G1 E{v}" for v in values)
    relative = total_extrusion(parse_program("M83\n" + literals))
    absolute = interpret(parse_program("M82\n" + literals), retraction=True)[-1].extruded
    assert relative == pytest.approx(sum(values), abs=1e-9)
    assert absolute == pytest.approx(values[-1], abs=1e-9)


def test_partition_additivity(part25):
    idx = build_layer_index(part25)
    per_layer = sum(total_extrusion(part25, (layer.z, layer.z)) for layer in idx)
    assert per_layer == pytest.approx(total_extrusion(part25), abs=1e-9)
