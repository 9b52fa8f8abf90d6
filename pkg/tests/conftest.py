import pytest

_RESULTS = {}


class CriterionRecorder:
    """Collects one verdict per acceptance criterion for the terminal summary."""

    def __init__(self, store):
        self.store = store

    def check(self, number, name, ok, detail=""):
        ok = bool(ok)
        combined, text = ok, detail
        prev = self.store.get(number)
        if prev is not None:
            # several checks may feed one criterion; any failure fails it
            combined = ok and prev[1]
            text = f"{prev[2]}; {detail}" if prev[2] else detail
            name = prev[0]
        self.store[number] = (name, combined, text)
        assert ok, f"criterion {number} ({name}) failed: {detail}"


@pytest.fixture(scope="session")
def criterion():
    return CriterionRecorder(_RESULTS)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        name, ok, detail = _RESULTS[number]
        verdict = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"criterion {number:>2} {verdict}  {name}: {detail}")
