from __future__ import annotations

import sys

import numpy as np
import pytest

from bufnet.generators import chain
from bufnet.policies import shared_buffer_backpressure, smooth_backpressure


@pytest.fixture
def sbp():
    return smooth_backpressure()


@pytest.fixture
def shared():
    return shared_buffer_backpressure()


@pytest.fixture
def chain2():
    # 1 -> 2 -> T with c = 2, b_2 = 5, mu_2 = 2, lambda = 1
    from bufnet.network import UNBOUNDED

    return chain(2, lam=1.0, c=2.0, mu=2.0, buffers=[UNBOUNDED, 5.0])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
