import numpy as np
import pytest

from grpo_plan.world import generate_scenes

# criterion number -> (name, passed, detail); filled by test_acceptance
ACCEPTANCE = {}


def record(number: int, name: str, passed: bool, detail: str = "") -> None:
    ACCEPTANCE[number] = (name, bool(passed), detail)
    print(f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2} {name}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {name}: {detail}")


@pytest.fixture(scope="session")
def small_scenes():
    return generate_scenes(40, 11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
