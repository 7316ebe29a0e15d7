import pytest

_ACCEPTANCE: dict[int, list[tuple[bool, str]]] = {}


@pytest.fixture(scope="session")
def acceptance():
    """Record the outcome of one acceptance check: ``record(criterion, ok, detail)``."""

    def record(criterion: int, ok: bool, detail: str) -> None:
        _ACCEPTANCE.setdefault(criterion, []).append((bool(ok), detail))

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(_ACCEPTANCE):
        checks = _ACCEPTANCE[criterion]
        verdict = "PASS" if all(ok for ok, _ in checks) else "FAIL"
        details = "; ".join(f"{'ok' if ok else 'FAILED'}: {d}" for ok, d in checks)
        terminalreporter.write_line(f"criterion {criterion}: {verdict} ({details})")
