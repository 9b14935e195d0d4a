import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from freqdetect.harness.cli import main  # noqa: E402

_VERDICTS = []


def record_verdict(name, ok, detail=""):
    line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
    _VERDICTS.append(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """The default experiment (synthetic data, default net, eps 8/255), timed."""
    out = tmp_path_factory.mktemp("desk")
    start = time.perf_counter()
    code = main(["pipeline", "--out", str(out)])
    return out, code, time.perf_counter() - start
