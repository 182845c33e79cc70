import numpy as np
import pytest

from morphfit.datagen import SynthConfig, generate_model
from morphfit.model import MorphableModel, ParamVector


@pytest.fixture(scope="session")
def toy_model():
    return generate_model(SynthConfig(seed=0))


@pytest.fixture
def tiny_model():
    """12-vertex model with random bases and a fan of triangles."""
    rng = np.random.default_rng(7)
    n = 12
    mean = rng.normal(size=3 * n) * 10
    tris = [[0, i, i + 1] for i in range(1, n - 1)]
    return MorphableModel(mean, rng.normal(size=(3 * n, 4)), rng.normal(size=(3 * n, 2)),
                          tris, [0, 3, 5])


def random_params(model, rng, scale=1.0):
    q = rng.normal(size=4)
    q *= np.sqrt(scale) / np.linalg.norm(q)
    return ParamVector(q, rng.normal(size=2) * 10, rng.normal(size=model.d_id),
                       rng.normal(size=model.d_exp))


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_report():
    """Collects one summary line per acceptance criterion, printed at session end."""
    return _ACCEPTANCE_LINES.append


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
