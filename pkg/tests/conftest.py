import contextlib
import time

import pytest

from nrfusion.geometry import CameraIntrinsics

_ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = {}


@pytest.fixture
def criterion(request):
    """Record one acceptance check; the terminal summary prints a line per criterion."""
    store = request.config.stash[_ACCEPTANCE]

    @contextlib.contextmanager
    def record(number: int, title: str):
        notes: list[str] = []
        t0 = time.perf_counter()
        ok = False
        try:
            yield notes
            ok = True
        finally:
            entry = store.setdefault(number, {"title": title, "ok": True, "notes": [], "seconds": 0.0})
            entry["ok"] &= ok
            entry["notes"].extend(notes)
            entry["seconds"] += time.perf_counter() - t0

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_ACCEPTANCE, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(store):
        e = store[number]
        status = "PASS" if e["ok"] else "FAIL"
        detail = "; ".join(e["notes"])
        terminalreporter.write_line(f"[{status}] criterion {number}: {e['title']} ({e['seconds']:.1f}s) {detail}")


@pytest.fixture
def small_camera():
    return CameraIntrinsics(60.0, 60.0, 31.5, 23.5, 64, 48)
