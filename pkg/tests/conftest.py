import pytest

# (criterion id, title, passed, detail) recorded by the acceptance tests
ACCEPTANCE = []


@pytest.fixture
def report():
    def record(cid, title, passed, detail):
        ACCEPTANCE.append((cid, title, bool(passed), detail))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid, title, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} {cid} {title}: {detail}")
