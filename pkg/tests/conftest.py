import os
import time

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", max_examples=500, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


# acceptance bookkeeping: one line per criterion in the terminal summary

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


class Recorder:
    def __init__(self, number, title):
        self.entry = _CRITERIA.setdefault(number, {"title": title, "parts": []})
        self.part = {"ok": False, "detail": "did not finish"}
        self.entry["parts"].append(self.part)
        self.start = time.perf_counter()

    @property
    def elapsed(self) -> float:
        return time.perf_counter() - self.start

    def check(self, checks: dict, detail: str):
        """``checks`` maps a short label to a bool; all must hold."""
        failed = [k for k, v in checks.items() if not v]
        self.part["ok"] = not failed
        self.part["detail"] = detail + (f" (failed: {', '.join(failed)})" if failed else "")
        assert not failed, self.part["detail"]


@pytest.fixture
def criterion(request):
    mark = request.node.get_closest_marker("criterion")
    return Recorder(*mark.args)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        ok = all(p["ok"] for p in entry["parts"])
        details = "; ".join(p["detail"] for p in entry["parts"])
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {entry['title']}: {details}")
