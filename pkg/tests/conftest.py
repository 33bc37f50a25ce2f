from __future__ import annotations

from fractions import Fraction
from itertools import product
from pathlib import Path

import numpy as np
import pytest

from fairorder.clock_stats import EmpiricalOffset

DATA = Path(__file__).parent / "data"

# worked four-message example: P(row precedes column)
WORKED_IDS = ["A", "B", "C", "D"]
WORKED_P = np.array(
    [
        [0.0, 0.85, 0.65, 0.92],
        [0.15, 0.0, 0.72, 0.68],
        [0.35, 0.28, 0.0, 0.80],
        [0.08, 0.32, 0.20, 0.0],
    ]
)

# nontransitive dice: X beats Y, Y beats Z, Z beats X, each with probability 5/9
DICE = {"X": (2, 4, 9), "Y": (1, 6, 8), "Z": (3, 5, 7)}


def dice_model(faces, width: float = 0.2) -> EmpiricalOffset:
    """Equal mass on a narrow box around each face, zero density in between."""
    edges, dens = [], []
    d = 1.0 / (len(faces) * width)
    for k, f in enumerate(sorted(faces)):
        edges += [f - width / 2, f + width / 2]
        dens += [d, 0.0] if k < len(faces) - 1 else [d]
    return EmpiricalOffset(np.array(edges), np.array(dens))


def brute_force_precedes(faces_a, faces_b, width: float = 0.2, sub: int = 8) -> Fraction:
    """P(theta_a < theta_b) by enumerating sub-points of every box pair (exact for disjoint boxes)."""
    offs = [(k + 0.5) / sub * width - width / 2 for k in range(sub)]
    pts_a = [f + o for f in faces_a for o in offs]
    pts_b = [f + o for f in faces_b for o in offs]
    wins = sum(1 for a, b in product(pts_a, pts_b) if a < b)
    return Fraction(wins, len(pts_a) * len(pts_b))


# -- acceptance reporting -----------------------------------------------------

_ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def criterion():
    """Record one acceptance criterion verdict; asserts so the test fails with it."""

    def record(name: str, ok: bool, detail: str = "") -> None:
        _ACCEPTANCE.append((name, bool(ok), detail))
        print(f"[{'PASS' if ok else 'FAIL'}] {name} {detail}")
        assert ok, f"{name}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
