import os
import sys

from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile(
    "default",
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
    max_examples=60,
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


_criteria = {}


def pytest_runtest_logreport(report):
    # one verdict per criterion; a failure in any phase wins over a pass
    if "test_acceptance.py" not in report.nodeid:
        return
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    key = props["criterion"]
    if report.skipped:
        verdict = "NOT REPRODUCIBLE"
    elif report.failed:
        verdict = "FAIL"
    else:
        verdict = "PASS"
    if report.when == "call" or verdict != "PASS":
        prev = _criteria.get(key)
        if prev is None or prev[0] == "PASS":
            _criteria[key] = (verdict, props.get("title", ""), props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_criteria):
        verdict, title, detail = _criteria[key]
        line = f"criterion {key:>2} {verdict}: {title}"
        if detail:
            line += f" [{detail}]"
        terminalreporter.write_line(line)
