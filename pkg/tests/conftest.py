import numpy as np
import pytest

from peerlab import tensor as T
from peerlab.nn import Model, init_params, preset


def rel_err(a, b) -> float:
    """Max elementwise relative error with denominator max(|a|, |b|, 1e-8)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def make_model(name: str, input_shape, classes: int = 3, seed: int = 0, role: str = "student") -> Model:
    spec = preset(name, input_shape, classes, role)
    return Model(spec, init_params(spec, seed))


@pytest.fixture(autouse=True)
def _double_precision():
    # tests may switch to float32; always restore the double default
    yield
    T.set_default_dtype(np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance PASS/FAIL lines at the end of the run."""
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
