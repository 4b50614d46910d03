import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", max_examples=200, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

from aeropose.geometry import Box  # noqa: E402

coord = st.floats(-500, 500, allow_nan=False, allow_infinity=False)
extent = st.floats(0.5, 300, allow_nan=False, allow_infinity=False)


@st.composite
def boxes(draw, min_extent=0.5):
    return Box(draw(coord), draw(coord), draw(st.floats(min_extent, 300)), draw(st.floats(min_extent, 300)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
