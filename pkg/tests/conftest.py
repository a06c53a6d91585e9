import pytest

# criterion number -> list of (passed, detail), filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, list[tuple[bool, str]]] = {}


@pytest.fixture
def criterion(capsys):
    """Record and immediately print one check of an acceptance criterion."""

    def record(n: int, ok, detail: str) -> bool:
        ok = bool(ok)
        ACCEPTANCE.setdefault(n, []).append((ok, detail))
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[n]
        status = "PASS" if all(ok for ok, _ in parts) else "FAIL"
        detail = "; ".join(d for _, d in parts)
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}")
