_ACCEPTANCE = []


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _ACCEPTANCE.append(report)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for report in _ACCEPTANCE:
        name = report.nodeid.split("::test_criterion_")[1]
        number, _, label = name.partition("_")
        status = "PASS" if report.passed else "FAIL"
        detail = "; ".join(f"{k}={v}" for k, v in report.user_properties)
        terminalreporter.write_line(f"[{status}] criterion {number} {label.replace('_', ' ')}"
                                    + (f": {detail}" if detail else ""))
