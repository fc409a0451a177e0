from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from printguard.gcode import parse_program, serialize_program
from printguard.parts import PartProfile, generate_part
from printguard.server import AccessDenied, LockConflict, NotFound, PrintServer, StateError
from printguard.telemetry import line_durations


@pytest.fixture(scope="module")
def data(part_small) -> bytes:
    return serialize_program(part_small).encode()


def test_upload_and_replace(data):
    s = PrintServer()
    s.upload("cube.gcode", data)
    assert "cube.gcode" in s.files and len(s.events) == 1
    s.upload("cube.gcode", data + b"G4 P0\n")
    assert s.events[-1].action == "replace"
    assert s.events[-1].args["previous"] != s.files["cube.gcode"].digest


def test_user_upload_during_lock_is_jammed(data):
    s = PrintServer()
    s.upload("cube.gcode", data)
    s.lock_file("cube.gcode", 10, actor="attacker")
    with pytest.raises(AccessDenied):
        s.upload("cube.gcode", data, actor="user")
    assert [e.action for e in s.events][-1] == "jammed"
    s.upload("cube.gcode", data + b"G4 P0\n", actor="attacker")  # owner still writes


def test_print_runs_to_completion(data):
    s = PrintServer()
    s.upload("p.gcode", data)
    s.start_print("p.gcode")
    s.advance_clock(s.job.total_time + 1)
    status = s.printer_status()
    assert status.state == "complete" and status.progress == 1.0


def test_pause_resume_keeps_line_index(data):
    s = PrintServer()
    s.upload("p.gcode", data)
    s.start_print("p.gcode")
    s.advance_clock(0.4 * s.job.total_time)
    s.pause()
    k = s.line_index
    s.advance_clock(30)
    assert s.line_index == k
    s.resume()
    assert s.line_index == k and s.job.state == "printing"


def test_replace_while_paused_splices_tail(part_small, data):
    other = generate_part(PartProfile(width=8.0, depth=8.0, layers=6, hotend_temp=205.0))
    s = PrintServer()
    s.upload("p.gcode", data)
    s.start_print("p.gcode")
    s.advance_clock(0.5 * s.job.total_time)
    s.pause()
    k = s.line_index
    s.upload("p.gcode", serialize_program(other).encode(), actor="attacker")
    s.resume()
    splice = [e for e in s.events if e.action == "splice"]
    assert len(splice) == 1 and splice[0].args["line_index"] == k
    resumed = [e for e in s.events if e.action == "resume"][0]
    assert resumed.args["line_index"] == k
    # the remaining lines are timed from the new file
    new_prefix = np.cumsum(line_durations(other))
    assert s.job.total_time == pytest.approx(float(new_prefix[-1]))


def test_illegal_transitions():
    s = PrintServer()
    for op in (s.resume, s.pause, s.cancel):
        with pytest.raises(StateError):
            op()


def test_status_idle_and_progress(data, part_small):
    s = PrintServer()
    assert s.printer_status().state == "idle" and s.printer_status().filename is None
    s.upload("p.gcode", data)
    s.start_print("p.gcode")
    s.advance_clock(0.3 * s.job.total_time)
    st_ = s.printer_status()
    motion = sum(1 for line in part_small.lines[:st_.line_index] if line.is_motion)
    assert st_.progress == pytest.approx(motion / part_small.motion_count())


def test_progress_monotone_in_replayed_print(data):
    s = PrintServer()
    s.upload("p.gcode", data)
    s.start_print("p.gcode")
    seen = []
    while s.job.state == "printing":
        s.advance_clock(3.7)
        seen.append(s.printer_status().progress)
    assert all(a <= b for a, b in zip(seen, seen[1:])) and seen[-1] == 1.0


def test_lock_expiry(data):
    s = PrintServer()
    s.upload("p.gcode", data)
    s.lock_file("p.gcode", 10)
    s.advance_clock(5)
    with pytest.raises(AccessDenied):
        s.read_file("p.gcode")
    s.advance_clock(6)
    assert s.read_file("p.gcode") == data
    assert any(e.action == "unlock" and e.args.get("reason") == "expired" for e in s.events)


def test_unlock_early_and_conflicts(data):
    s = PrintServer()
    s.upload("p.gcode", data)
    s.lock_file("p.gcode", 10)
    s.unlock_file("p.gcode")
    assert s.read_file("p.gcode") == data
    with pytest.raises(NotFound):
        s.lock_file("missing.gcode", 5)
    s.lock_file("p.gcode", 5, actor="attacker")
    with pytest.raises(LockConflict):
        s.lock_file("p.gcode", 5, actor="user")


def test_zero_advance_is_noop(data):
    s = PrintServer()
    s.upload("p.gcode", data)
    s.start_print("p.gcode")
    before = s.state_digest()
    s.advance_clock(0)
    assert s.state_digest() == before


def test_fine_and_coarse_stepping_agree(data):
    fine, coarse = PrintServer(), PrintServer()
    for s in (fine, coarse):
        s.upload("p.gcode", data)
        s.start_print("p.gcode")
    for _ in range(40):
        fine.advance_clock(0.25)
    coarse.advance_clock(10.0)
    assert fine.job.state == "printing"
    assert fine.line_index == coarse.line_index


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["adv", "pause", "resume", "lock", "unlock", "upload", "cancel"]),
                          st.floats(min_value=0, max_value=30)), max_size=20))
def test_replay_reconstructs_state(data, ops):
    s = PrintServer()
    s.upload("p.gcode", data)
    s.start_print("p.gcode")
    alt = data + b"G4 P100\n"
    for op, x in ops:
        try:
            if op == "adv":
                s.advance_clock(x)
            elif op == "pause":
                s.pause()
            elif op == "resume":
                s.resume()
            elif op == "lock":
                s.lock_file("p.gcode", max(x, 1.0), actor="attacker")
            elif op == "unlock":
                s.unlock_file("p.gcode", actor="attacker")
            elif op == "upload":
                s.upload("p.gcode", alt if x > 15 else data, actor="attacker")
            elif op == "cancel":
                s.cancel()
        except (StateError, LockConflict, AccessDenied):
            pass
    times = [e.t for e in s.events]
    assert all(a <= b for a, b in zip(times, times[1:]))
    again = PrintServer.replay(s.events, s.blobs, until=s.clock)
    assert again.state_digest() == s.state_digest()
    # every digest change is attributable
    changes = [e for e in s.events if e.action in ("upload", "replace")]
    assert all(e.actor in ("user", "attacker") for e in changes)
