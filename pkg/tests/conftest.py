import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

import acceptance_log  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not acceptance_log.LINES:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for key in sorted(acceptance_log.LINES, key=lambda k: (int(k.rstrip("abcdefgh")), k)):
        terminalreporter.write_line(acceptance_log.LINES[key])
