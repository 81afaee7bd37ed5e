import numpy as np
import pytest

from codec.zoo import build_toy_cnn


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_cnn():
    # small enough for finite differences over every input coordinate
    return build_toy_cnn(4, 2, [3, 4], input_shape=(2, 8, 8), seed=7)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


@pytest.fixture(scope="session")
def biased_cnn(tiny_cnn):
    # non-zero biases break positive homogeneity, so path integrals are not exact
    r = np.random.default_rng(99)
    params = [np.array(a) + (r.normal(0, 0.3, size=a.shape) if a.ndim == 1 else 0.0) for _, _, a in tiny_cnn.parameters()]
    return tiny_cnn.with_parameters(params)


# acceptance reporting: one line per criterion in the terminal summary
ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def acceptance_log(pytestconfig):
    return pytestconfig.stash.setdefault(ACCEPTANCE_KEY, {})


_RAN = {}  # criterion number -> outcome of its test


def pytest_runtest_logreport(report):
    name = report.nodeid.rpartition("::")[2]
    if name.startswith("test_criterion_") and (report.when == "call" or report.outcome != "passed"):
        _RAN[int(name.split("_")[2])] = report.outcome


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, {})
    if not _RAN:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RAN):
        terminalreporter.write_line(lines.get(n, f"FAIL criterion {n:2d}: test {_RAN[n]} before reporting"))
