from __future__ import annotations

from pathlib import Path

import pytest

from printguard.gcode import parse_program
from printguard.parts import PartProfile, generate_part

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def cube_text() -> str:
    return (FIXTURES / "cube20.gcode").read_text()


@pytest.fixture(scope="session")
def cube(cube_text):
    return parse_program(cube_text)


@pytest.fixture(scope="session")
def part25():
    """25-layer 20 x 20 mm square part."""
    return generate_part(PartProfile())


@pytest.fixture(scope="session")
def part_small():
    return generate_part(PartProfile(width=8.0, depth=8.0, layers=6))
