import sys

import numpy as np
import pytest

from ddnkit.netspec import build_graph, parse_spec

SMALL_SPEC = """\
stages 3
stage 1 convs=2 channels=4
stage 2 convs=2 channels=8
stage 3 convs=2 channels=16
"""


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_spec():
    return parse_spec(SMALL_SPEC)


@pytest.fixture
def small_graph(small_spec):
    return build_graph(small_spec, np.random.default_rng(0))


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(acceptance.RESULTS, key=lambda s: int(s.split()[1])):
        terminalreporter.write_line(line)
