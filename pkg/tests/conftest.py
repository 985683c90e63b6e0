import pytest

# criterion number -> (status, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def record(number: int, passed, detail: str = ""):
    """``passed`` is True, False or None (skipped)."""
    status = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
    ACCEPTANCE[number] = (status, detail)
    print(f"criterion {number:>2}: {status}  {detail}")


@pytest.hookimpl(trylast=True)
def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        status, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2}: {status}  {detail}")
