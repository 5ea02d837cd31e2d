import os
from pathlib import Path

import pytest

from fslgan import dataio

FALLBACK_DATA = Path("/root/data/mnist")


def mnist_root() -> Path | None:
    for cand in (os.environ.get(dataio.DATA_ENV), FALLBACK_DATA):
        if cand and (Path(cand) / dataio.TRAIN_FILES[0]).exists() or \
                cand and (Path(cand) / (dataio.TRAIN_FILES[0] + ".gz")).exists():
            return Path(cand)
    return None


@pytest.fixture(scope="session")
def mnist_dir():
    root = mnist_root()
    if root is None:
        pytest.skip(f"MNIST not found; set {dataio.DATA_ENV}")
    return root


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k.split()[0])):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {key}: {detail}")
