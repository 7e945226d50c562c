import contextlib

# criterion number -> (title, "PASS" | "FAIL", detail)
ACCEPTANCE = {}


@contextlib.contextmanager
def criterion(number: int, title: str):
    """Record the outcome of one acceptance criterion; failures still propagate."""
    detail = []
    try:
        yield detail
    except BaseException:
        ACCEPTANCE[number] = (title, "FAIL", "; ".join(detail))
        raise
    ACCEPTANCE[number] = (title, "PASS", "; ".join(detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, status, detail = ACCEPTANCE[number]
        line = f"[{status}] criterion {number}: {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
