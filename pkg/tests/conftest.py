import sys

import numpy as np
import pytest

from smoelab.numerics import Rng


@pytest.fixture
def rng():
    return Rng(1234)


def scalar_silu(v):
    return v / (1.0 + np.exp(-v))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
