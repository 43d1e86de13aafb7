import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from amdflow.structure import CrystalStructure  # noqa: E402

DEMO = Path(__file__).resolve().parents[1] / "demo"


def cubic(a, elements, frac, label=""):
    return CrystalStructure.from_arrays(np.eye(3) * a, elements, frac, label)


@pytest.fixture
def cu_cubic():
    return cubic(3.6, ["Cu"], [[0, 0, 0]], "Cu")


@pytest.fixture
def demo_dir():
    return DEMO


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
