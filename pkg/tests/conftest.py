import pytest

_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


class AcceptanceLog:
    def record(self, criterion: int, ok: bool, detail: str) -> None:
        _ACCEPTANCE[criterion] = (bool(ok), detail)
        print(f"acceptance {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail


@pytest.fixture
def acceptance():
    return AcceptanceLog()


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
