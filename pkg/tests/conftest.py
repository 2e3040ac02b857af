"""Shared fixtures and the acceptance-summary terminal section."""

import sys

import numpy as np
import pytest

from cascadeseg.data import SynthParams, generate_synthetic

# fixed identity of the desk-scale experiment data (200 train / 50 test, 64x64)
DESK_CANVAS = (64, 64)
DESK_TRAIN = SynthParams(count=200, seed=100, canvas=DESK_CANVAS)
DESK_TEST = SynthParams(count=50, seed=200, canvas=DESK_CANVAS)


@pytest.fixture(scope="session")
def desk_data():
    """The desk-scale dataset shared by the training/ablation criteria."""
    return generate_synthetic(DESK_TRAIN), generate_synthetic(DESK_TEST)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    # Reuse the module instance pytest already imported; a fresh import
    # would see an empty RESULTS dict.
    mod = sys.modules.get("test_acceptance") or sys.modules.get(
        "tests.test_acceptance"
    )
    if mod is None or not mod.RESULTS:
        return
    test_acceptance = mod
    terminalreporter.section("acceptance criteria")
    for num, name in test_acceptance.CRITERIA:
        rec = test_acceptance.RESULTS.get(num)
        if rec is None:
            line = f"criterion {num} ({name}): NOT RUN"
        else:
            ok, detail = rec
            status = "PASS" if ok else "FAIL"
            line = f"criterion {num} ({name}): {status}"
            if detail:
                line += f" — {detail}"
        terminalreporter.write_line(line)
