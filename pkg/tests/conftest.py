import pytest

ACCEPTANCE_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "criterion(label): acceptance criterion; one PASS/FAIL line is printed per label")


def pytest_runtest_logreport(report):
    if report.when != "call":
        return
    marker_label = getattr(report, "_criterion_label", None)
    if marker_label is not None:
        ACCEPTANCE_RESULTS[marker_label] = report.outcome


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m and report.when == "call":
        report._criterion_label = m.args[0]


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for label in sorted(ACCEPTANCE_RESULTS, key=lambda s: int(s.split(":")[0])):
        outcome = ACCEPTANCE_RESULTS[label]
        word = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {label}: {word}")
