import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("sinklab", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("sinklab")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(autouse=True)
def _isolated_out(tmp_path, monkeypatch):
    # CLI runs never leak into the working tree
    monkeypatch.setenv("SINKLAB_OUT", str(tmp_path / "runs"))


@pytest.fixture(scope="session")
def softmax_model():
    """One-layer softmax model trained with the default protocol (a few seconds)."""
    from sinklab.grad import TrainConfig, init_params, train

    params, history = train(init_params(0, (1,), 16, "softmax"), TrainConfig(seed=0), L=16, n=16)
    assert history.converged
    return params


ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


@pytest.fixture(scope="session")
def acceptance_log(request):
    return request.config.stash[ACCEPTANCE]


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(lines):
        terminalreporter.write_line(f"criterion {number:>2} {'PASS' if passed else 'FAIL'}: {detail}")
