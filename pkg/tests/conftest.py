import pytest

_RESULTS: dict[int, list[tuple[bool, str]]] = {}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records one check of acceptance criterion n."""

    def record(n: int, ok: bool, detail: str) -> bool:
        _RESULTS.setdefault(n, []).append((bool(ok), detail))
        print(f"criterion {n} {'PASS' if ok else 'FAIL'}: {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        checks = _RESULTS[n]
        ok = all(c for c, _ in checks)
        detail = "; ".join(d for _, d in checks)
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
