import numpy as np
import pytest

from dualz.imaging import OpticalConfig, random_particles, simulate_stack


@pytest.fixture(scope="session")
def small_cfg():
    return OpticalConfig(crop_px=32)


@pytest.fixture(scope="session")
def small_stacks(small_cfg):
    parts = random_particles(40, small_cfg, 500, 1250, seed=3)
    return [simulate_stack(p, 0, 1750, small_cfg, seed=100 + p.id) for p in parts]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE = {}


def record(number, ok, detail):
    ACCEPTANCE[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(ACCEPTANCE[number])
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
