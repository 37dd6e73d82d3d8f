import numpy as np
import pytest

from egorender.body import BodyConfig, build_canonical_body
from egorender.synthgen import Dataset, GenConfig, generate_dataset

CRITERIA_LINES = []


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    CRITERIA_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def body():
    return build_canonical_body(BodyConfig())


@pytest.fixture(scope="session")
def small_cfg():
    return GenConfig(n_frames=20, n_textures=1, n_backgrounds=3, n_external_views=3, ego_size=64,
                     view_size=48, view_focal=60.0, seed=5, chart_size=32)


@pytest.fixture(scope="session")
def small_ds(tmp_path_factory, small_cfg):
    root = tmp_path_factory.mktemp("small_ds")
    generate_dataset(small_cfg, root)
    return Dataset(root)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
