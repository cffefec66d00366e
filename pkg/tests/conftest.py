import pytest

# (number, title, status, detail) collected by the acceptance suite
ACCEPTANCE = []


@pytest.fixture
def criterion():
    """Record one acceptance line and fail the test when it did not pass.

    ``known_gap`` names the documented reason a criterion is not met by
    this model; a failing criterion with a known gap is reported as FAIL and
    marked xfail instead of erroring the run. A passing one is a plain PASS.
    """

    def record(number, title, passed, detail="", known_gap=None):
        status = "PASS" if passed else "FAIL"
        ACCEPTANCE.append((number, title, status, detail, None if passed else known_gap))
        line = f"criterion {number} ({title}): {status} {detail}"
        print(line)
        if not passed and known_gap:
            pytest.xfail(f"{line} [known gap: {known_gap}]")
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, status, detail, gap in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"[{status}] {number:>2}. {title}: {detail}")
        if gap:
            terminalreporter.write_line(f"         known gap: {gap}")
