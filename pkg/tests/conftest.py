import numpy as np
import pytest

from cnstn.spectral import TorusGrid


@pytest.fixture
def grid16():
    return TorusGrid(2, 4, 16)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE: dict[int, str] = {}


class AcceptanceRecorder:
    """Collects named sub-checks for one criterion and asserts them together."""

    def __init__(self, number: int, title: str):
        self.number = number
        self.title = title
        self.checks: list[tuple[str, bool, str]] = []

    def check(self, name: str, ok, detail: str = "") -> bool:
        self.checks.append((name, bool(ok), detail))
        return bool(ok)

    def finish(self) -> None:
        ok = all(c[1] for c in self.checks)
        failed = [f"{n} ({d})" for n, good, d in self.checks if not good]
        info = "; ".join(failed) if failed else "; ".join(f"{n}: {d}" for n, _, d in self.checks if d)
        line = f"criterion {self.number} [{self.title}]: {'PASS' if ok else 'FAIL'} | {info}"
        ACCEPTANCE[self.number] = line
        print(line)
        assert ok, line


@pytest.fixture
def acceptance(request):
    marker = request.node.get_closest_marker("criterion")
    number, title = marker.args
    rec = AcceptanceRecorder(number, title)
    yield rec
    if number not in ACCEPTANCE:
        ACCEPTANCE[number] = f"criterion {number} [{title}]: FAIL | raised before completing"


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
