from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

import pytest

_acceptance: list[tuple[str, str, float, str]] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if report.when == "call" and item.path.name == "test_acceptance.py":
        props = dict(item.user_properties)
        _acceptance.append((props.get("criterion", item.name), report.outcome.upper(), report.duration, props.get("measured", "")))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome, seconds, measured in sorted(_acceptance, key=lambda r: int(r[0].split()[0]) if r[0][0].isdigit() else 99):
        terminalreporter.write_line(f"{'PASS' if outcome == 'PASSED' else 'FAIL'}  criterion {name}  ({seconds:.1f} s)  {measured}")
