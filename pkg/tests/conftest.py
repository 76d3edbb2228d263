import numpy as np
import pytest
import torch

from attrcl.datamodel import SynthConfig, generate_synthetic


@pytest.fixture(autouse=True)
def _single_thread():
    # keeps float reductions in a fixed order across runs
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_data():
    """2 attributes x 3 subclasses x 8 items at 32 px."""
    return generate_synthetic(SynthConfig.desk(2, 3, 8, 32), seed=0)


@pytest.fixture(scope="session")
def desk_data():
    return generate_synthetic(SynthConfig.desk(), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
        terminalreporter.write_line(line)
