import os
import sys
from pathlib import Path

# allow up to 4 kernel threads so thread-count determinism can be exercised
os.environ.setdefault("NUMBA_NUM_THREADS", "4")
sys.path.insert(0, str(Path(__file__).parent))

import numpy as np
import pytest

from colornormnet.model import ArchSpec, build_model
from colornormnet.tensor_core import Rng


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def model():
    return build_model(ArchSpec(), Rng(7))


@pytest.fixture
def zero_head_model():
    m = build_model(ArchSpec(), Rng(7))
    m.head.weights[...] = 0
    m.head.bias[...] = 0
    return m.eval()


def random_image(rng: Rng, h: int, w: int) -> np.ndarray:
    return rng.uniform_array(h * w * 3).reshape(h, w, 3).astype(np.float32)


# -- acceptance reporting ----------------------------------------------------------------

ACCEPTANCE = {}


@pytest.fixture
def acceptance(request):
    """Record a criterion's verdict; printed as one line per criterion at the end of the run."""
    def record(number: int, name: str, passed: bool, detail: str = ""):
        ACCEPTANCE[number] = (name, passed, detail)
        print(f"ACCEPTANCE {number} {name}: {'PASS' if passed else 'FAIL'} {detail}")
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        name, passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number}. {name} - {detail}")
