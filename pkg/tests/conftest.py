import math

import numpy as np
import pytest

from telinet.fixture import make_fixture
from telinet.layers import Dense, Flatten, Sigmoid
from telinet.models import Model, ModelSpec

PROBE_SIZE = 8


def probe_model(weight: float, bias: float) -> Model:
    """Flatten -> Dense(1) -> Sigmoid on 1x8x8 inputs with every kernel entry = ``weight``."""
    n = PROBE_SIZE * PROBE_SIZE
    spec = ModelSpec("probe", (1, PROBE_SIZE, PROBE_SIZE),
                     [Flatten().config(), Dense(n, 1).config(), Sigmoid().config()])
    model = Model(spec)
    params = model.parameters()
    params["dense_0/kernel"][:] = weight
    params["dense_0/bias"][:] = bias
    return model


@pytest.fixture
def constant_model():
    """Outputs 0.9 whatever the input."""
    return probe_model(0.0, math.log(0.9 / 0.1))


@pytest.fixture
def oracle_model():
    """Thresholds mean brightness at 125/255, which separates the fixture classes."""
    n = PROBE_SIZE * PROBE_SIZE
    return probe_model(100.0 / n, -100.0 * 125 / 255)


@pytest.fixture(scope="session")
def fixture_root(tmp_path_factory):
    return make_fixture(tmp_path_factory.mktemp("fx"), n_train=8, n_validation=8, size=8,
                        slices_per_series=2)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line per acceptance criterion for the terminal summary."""
    lines = request.config.__dict__.setdefault("_acceptance_lines", {})

    def record(criterion: int, ok: bool, detail: str) -> bool:
        line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} ({detail})"
        lines[criterion] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.__dict__.get("_acceptance_lines")
    if lines:
        terminalreporter.section("acceptance criteria")
        for criterion in sorted(lines):
            terminalreporter.write_line(lines[criterion])
