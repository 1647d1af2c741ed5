import pytest

_CRITERIA: dict[int, str] = {}


@pytest.fixture(scope="session")
def report_criterion():
    """Record one pass/fail line for an acceptance criterion.

    ``checks`` is a list of ``(label, ok)`` pairs; the line lists every check
    and marks the failing ones.
    """

    def record(number: int, title: str, checks: list[tuple[str, bool]]) -> bool:
        ok = all(c for _, c in checks)
        parts = [label if good else f"FAILED {label}" for label, good in checks]
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title} | " + "; ".join(parts)
        _CRITERIA[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[k])
