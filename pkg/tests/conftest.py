import os

# single-threaded BLAS keeps timings and reductions reproducible
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from alignrefine.ctc import Vocabulary  # noqa: E402


@pytest.fixture
def vocab_ab():
    return Vocabulary(("A", "B"))


def random_logprobs(rng: np.random.Generator, T: int, V: int, scale: float = 1.0) -> np.ndarray:
    x = rng.normal(scale=scale, size=(T, V))
    return x - np.log(np.exp(x).sum(axis=1, keepdims=True))


# acceptance reporting ---------------------------------------------------------
# test_acceptance.py records one line per criterion here; the lines are printed
# in the terminal summary so they survive output capture.
ACCEPTANCE_LINES: dict[int, str] = {}


def record_acceptance(number: int, name: str, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"[{'PASS' if passed else 'FAIL'}] {number:>2}. {name}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
