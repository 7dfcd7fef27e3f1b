import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from npmlca.model import Dataset, ModelSpec, Parameters  # noqa: E402


def random_parameters(spec: ModelSpec, rng, scale=1.5) -> Parameters:
    p = Parameters.zeros(spec)
    vec = rng.normal(0.0, scale, p.to_vector().size)
    return Parameters.from_vector(vec, spec)


def random_dataset(spec: ModelSpec, rng, sizes) -> Dataset:
    N = int(sum(sizes))
    site = np.repeat(np.arange(len(sizes)), sizes)
    y = np.column_stack([rng.integers(1, s + 1, N) for s in spec.n_categories])
    x = rng.normal(size=(N, spec.P1))
    z = rng.normal(size=(len(sizes), spec.P2))
    return Dataset(tuple(range(1, len(sizes) + 1)), site, y, x, z)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
