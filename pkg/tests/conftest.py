import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from smbop.synthetic import SizeParams, gen_synthetic  # noqa: E402


@pytest.fixture(scope="session")
def synthetic_small():
    return gen_synthetic(3, 60, SizeParams(max_height=5))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.RESULTS:
        terminalreporter.write_line(line)
