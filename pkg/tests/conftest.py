import os
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
ACCEPTANCE_LINES: list[str] = []


def data_root() -> Path:
    return Path(os.environ.get("QUADNET_DATA_DIR", ROOT / "data"))


def mnist_dir() -> Path:
    return data_root() / "mnist"


def cifar_dir() -> Path:
    return data_root() / "cifar10"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
