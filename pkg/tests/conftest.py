import warnings

import numpy as np
import pytest

from zsvd import toynet
from zsvd.model import ModelSpec
from zsvd.pipeline import whiten_model

DEFAULT_DIMS = (32, 64, 48, 10)


def default_setup(seed: int, t: int = 512):
    """Default toy spec, self-labelled calibration set, whitened layers."""
    spec = ModelSpec(DEFAULT_DIMS, "gelu_tanh", seed)
    model = toynet.build_model(spec)
    calib = toynet.gen_calibration(spec, seed, t, input_seed=seed + 1)
    return model, calib, whiten_model(model, calib)


@pytest.fixture(scope="session")
def toy():
    return default_setup(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _quiet_exhaustion():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", "candidates exhausted", RuntimeWarning)
        yield


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one acceptance line; the terminal summary prints all of them."""

    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"{'PASS' if passed else 'FAIL'} criterion {number:2d}: {detail}"
        print(line)
        ACCEPTANCE_LINES.append(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
