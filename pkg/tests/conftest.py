import time
from contextlib import contextmanager

import pytest

RESULTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[RESULTS] = []


@pytest.fixture
def criterion(request):
    """Context manager that records one PASS/FAIL line for an acceptance criterion."""
    results = request.config.stash[RESULTS]

    @contextmanager
    def record(cid: str, title: str):
        info = {}
        t0 = time.perf_counter()
        try:
            yield info
        except BaseException as exc:
            detail = info.get("detail", "") or str(exc).splitlines()[0][:160]
            line = f"[{cid}] FAIL {title} ({time.perf_counter() - t0:.1f}s) {detail}"
            results.append(line)
            print(line)
            raise
        line = f"[{cid}] PASS {title} ({time.perf_counter() - t0:.1f}s) {info.get('detail', '')}".rstrip()
        results.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(RESULTS, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(lines, key=lambda s: int(s[1 : s.index("]")])):
        terminalreporter.write_line(line)
