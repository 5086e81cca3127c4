import os

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _clean_tape():
    from jointface.tensor import get_tape
    get_tape().clear()
    yield
    get_tape().clear()


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    from jointface.dataset import build_dataset
    path = tmp_path_factory.mktemp("data") / "small"
    build_dataset(path, master_seed=3, count=40)
    return path


ACCEPTANCE_LINES = []


def record_acceptance(criterion: str, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
