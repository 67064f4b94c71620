import pytest

_RESULTS = pytest.StashKey[dict]()


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per acceptance criterion; printed in the summary."""
    results = request.config.stash.setdefault(_RESULTS, {})

    def record(number: int, title: str, passed: bool, detail: str = ""):
        results[number] = (title, passed, detail)
        print(f"ACCEPTANCE {number} {'PASS' if passed else 'FAIL'}: {title} {detail}".rstrip())
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_RESULTS, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, passed, detail = results[number]
        line = f"ACCEPTANCE {number} {'PASS' if passed else 'FAIL'}: {title}"
        terminalreporter.write_line(f"{line} [{detail}]" if detail else line)
