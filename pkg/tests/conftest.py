from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cbsde import Lattice, TimeGrid, switching_to_constrained  # noqa: E402
from cbsde.instances import affine_pair, deterministic_pair  # noqa: E402

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@pytest.fixture(scope="session")
def d1():
    return deterministic_pair()


@pytest.fixture(scope="session")
def d1_lattice(d1):
    return Lattice(d1, TimeGrid(1.0, 200))


@pytest.fixture(scope="session")
def d1_constrained(d1):
    return switching_to_constrained(d1)


@pytest.fixture(scope="session")
def affine():
    return affine_pair()


@pytest.fixture(scope="session")
def affine_lattice(affine):
    return Lattice(affine, TimeGrid(1.0, 50))


@pytest.fixture(scope="session")
def configs():
    return CONFIGS


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance.py" in report.nodeid:
        props = dict(report.user_properties)
        if "criterion" in props:
            _ACCEPTANCE.append((props["criterion"], report.passed, props.get("detail", "")))


_ACCEPTANCE: list = []


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num, ok, detail in sorted(_ACCEPTANCE):
        terminalreporter.write_line(f"criterion {num:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
