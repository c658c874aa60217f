import numpy as np
import pytest
import torch

from vox2seg.data_io import PhantomSpec, phantom_subjects

# criterion id -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_phantoms():
    """Eight 16^3 phantoms, small enough for fast training smoke tests."""
    return phantom_subjects(8, size=(16, 16, 16), seed=5)


@pytest.fixture(scope="session")
def phantom_32():
    spec = PhantomSpec(size=(32, 32, 32), seed=11, no_et_fraction=0.0)
    return spec


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k.split()[0])):
        passed, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] criterion {key}: {detail}")
