import pytest

ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture
def record(request):
    """Print and remember one PASS/FAIL line for an acceptance criterion."""
    results = request.config.stash.setdefault(ACCEPTANCE_KEY, {})
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def _record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        results[number] = line
        with capman.global_and_fixture_disabled():
            print("\n" + line, flush=True)

    return _record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(ACCEPTANCE_KEY, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number])
