import numpy as np
import pytest

from panoslam.dataset import Dataset, GenerateConfig, generate_dataset
from panoslam.geometry import PoseSE3, Sim3, so3_exp

SMALL = GenerateConfig(scenario="straight_500m", seed=3, width=512, height=256,
                       landmark_count=4000, max_frames=40)


def random_pose(rng, scale=10.0):
    return PoseSE3.from_matrix(so3_exp(rng.normal(size=3)), rng.normal(scale=scale, size=3))


def random_sim3(rng):
    return Sim3.from_matrix(so3_exp(rng.normal(size=3)), rng.normal(scale=5.0, size=3),
                            float(np.exp(rng.normal(scale=0.3))))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """40 frames of the straight scenario at half resolution."""
    root = tmp_path_factory.mktemp("small")
    generate_dataset(root, SMALL)
    return Dataset(root)


@pytest.fixture(scope="session")
def loop_dataset(tmp_path_factory):
    """The full loop_1km sequence (seed 1), generated once per session."""
    import time

    from panoslam.cli import cmd_generate

    root = tmp_path_factory.mktemp("loop_1km")
    t0 = time.perf_counter()
    cmd_generate("loop_1km", 1, root)
    ds = Dataset(root)
    ds.generation_seconds = time.perf_counter() - t0
    return ds


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def acceptance(name, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
