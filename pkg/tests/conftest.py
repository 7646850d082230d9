import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from bayesmfa.config import bundled_config_path, parse_config  # noqa: E402


@pytest.fixture(scope="session")
def toy_config_path():
    return bundled_config_path("toy")


@pytest.fixture(scope="session")
def steel_config():
    return parse_config(bundled_config_path("steel"))


@pytest.fixture
def toy_config(tmp_path, toy_config_path):
    return parse_config(toy_config_path, output=str(tmp_path / "out"))


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(RESULTS):
        ok, detail = RESULTS[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
