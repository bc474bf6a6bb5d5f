import os
import sys
import time

import pytest

sys.path.insert(0, os.path.dirname(__file__))

CRITERIA_LINES = []


def record_criterion(number, ok, detail):
    """Remember one acceptance verdict for the terminal summary and return ``ok``."""
    CRITERIA_LINES.append(f"criterion {number}: {'PASS' if ok else 'FAIL'} | {detail}")
    print(CRITERIA_LINES[-1])
    return ok


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def desk_report():
    """The desk-scale logistic study at the pre-committed master seed 1."""
    from masub.harness import builtin_scenario, run_replications

    config = builtin_scenario("logistic-paper", seed=1)
    t0 = time.perf_counter()
    report = run_replications(config, workers=os.cpu_count() or 1)
    return report, time.perf_counter() - t0
