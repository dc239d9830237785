import numpy as np
import pytest

from helpers import ACCEPTANCE
from unetseg.tensor import default_dtype


@pytest.fixture
def f64():
    """Run the test with float64 as the default tensor dtype."""
    with default_dtype(np.float64):
        yield


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, (status, detail) in ACCEPTANCE.items():
        terminalreporter.write_line(f"{status:4}  {name}: {detail}")
