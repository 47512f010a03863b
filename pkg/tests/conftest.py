import time
from pathlib import Path

import pytest

from dartkit.config import parse_config
from dartkit.pilot import METHODS, run_pilot, write_pilot

# criterion number -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE: dict = {}


def record(number: int, name: str, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (name, bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        name, passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number}. {name}: {detail}")


@pytest.fixture
def recorder():
    return record


# -- shared desk-suite pilot -----------------------------------------------------------

SUITE = Path(__file__).parents[1] / "configs" / "desk_suite.ini"


@pytest.fixture(scope="session")
def suite_cfg():
    return parse_config(SUITE)


@pytest.fixture(scope="session")
def pilot(suite_cfg, tmp_path_factory):
    """One timed run of the full desk suite: (report, seconds, output directory)."""
    out = tmp_path_factory.mktemp("pilot_a")
    start = time.perf_counter()
    report = run_pilot(suite_cfg.tasks, suite_cfg, methods=METHODS)
    elapsed = time.perf_counter() - start
    write_pilot(report, out, suite_cfg.eval_attacks[0].method)
    return report, elapsed, out
